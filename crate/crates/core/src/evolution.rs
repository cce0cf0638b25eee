//! Per-population evolutionary loop.
//!
//! An individual is a fixed-length vector of genes whose outputs are fused
//! by the elastic net. Its isolated fitness is the k-fold cross-validated
//! RMSE of that fusion on the training split. Populations never exchange
//! genes; the only cross-population channel is abstraction injection.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ahsam::AbstractionRegistry;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exprtree::{self, ExprTree, TerminalSet};
use crate::linfit::{self, cv_rmse, DesignMatrix, ElasticNet, Folds, LinearFit};

/// Relative improvement below which the best fitness counts as unchanged.
pub const IMPROVEMENT_REL_TOL: f64 = 1e-9;

/// Engine hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub population_size: usize,
    pub max_generations: usize,
    /// Generations without ensemble improvement before the run stops.
    pub stall_generations: usize,
    /// Per-population stagnation count that arms abstraction.
    pub ahsam_trigger: usize,
    pub genes_per_individual: usize,
    pub max_tree_depth: usize,
    /// Initial depths are drawn uniformly from this inclusive range.
    pub init_depth_range: (usize, usize),
    pub p_crossover: f64,
    pub p_mutation: f64,
    pub p_reproduction: f64,
    pub constant_range: (f64, f64),
    pub k_folds: usize,
    pub tournament_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Ensemble members taken from each population.
    pub top_m: usize,
    /// Significance level of the abstraction filter.
    pub alpha: f64,
    pub max_abstractions_per_activation: usize,
    pub prune_rounds: usize,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            population_size: 50,
            max_generations: 300,
            stall_generations: 30,
            ahsam_trigger: 25,
            genes_per_individual: 3,
            max_tree_depth: 15,
            init_depth_range: (2, 6),
            p_crossover: 0.84,
            p_mutation: 0.14,
            p_reproduction: 0.02,
            constant_range: (-10.0, 10.0),
            k_folds: 5,
            tournament_size: 4,
            lambda1: linfit::DEFAULT_LAMBDA1,
            lambda2: linfit::DEFAULT_LAMBDA2,
            top_m: 1,
            alpha: 0.05,
            max_abstractions_per_activation: 3,
            prune_rounds: 10,
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    /// Multi-population defaults (3 genes per individual).
    pub fn digsp() -> Self {
        Self::default()
    }

    /// Single-population baseline defaults (9 genes per individual).
    pub fn bgp() -> Self {
        EvolutionConfig {
            genes_per_individual: 9,
            ..Self::default()
        }
    }

    pub fn net(&self) -> ElasticNet {
        ElasticNet::new(self.lambda1, self.lambda2)
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_crossover, self.p_mutation, self.p_reproduction];
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Config(format!("operator probabilities must be >= 0, got {probs:?}")));
        }
        if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("operator probabilities must sum to 1, got {probs:?}")));
        }
        let checks = [
            (self.population_size >= 2, "population_size must be >= 2"),
            (self.genes_per_individual >= 1, "genes_per_individual must be >= 1"),
            (self.max_tree_depth >= 1, "max_tree_depth must be >= 1"),
            (self.k_folds >= 2, "k_folds must be >= 2"),
            (self.tournament_size >= 1, "tournament_size must be >= 1"),
            (self.top_m >= 1, "top_m must be >= 1"),
            (
                self.init_depth_range.0 >= 1 && self.init_depth_range.0 <= self.init_depth_range.1,
                "init_depth_range must satisfy 1 <= lo <= hi",
            ),
            (self.lambda1 >= 0.0 && self.lambda2 >= 0.0, "lambdas must be >= 0"),
            ((0.0..=1.0).contains(&self.alpha), "alpha must lie in [0, 1]"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        let (lo, hi) = self.constant_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("invalid constant range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// A gene vector with its fusion weights and fitness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genes: Vec<ExprTree>,
    pub fit: Option<LinearFit>,
    /// Cross-validated RMSE; `None` until evaluated.
    pub isolated_fitness: Option<f64>,
}

impl Individual {
    pub fn new(genes: Vec<ExprTree>) -> Self {
        Individual {
            genes,
            fit: None,
            isolated_fitness: None,
        }
    }

    pub fn is_evaluated(&self) -> bool {
        self.isolated_fitness.is_some() && self.fit.is_some()
    }

    /// Isolated fitness, `+∞` before evaluation.
    pub fn fitness(&self) -> f64 {
        self.isolated_fitness.unwrap_or(f64::INFINITY)
    }

    pub fn node_count(&self) -> usize {
        self.genes.iter().map(ExprTree::node_count).sum()
    }

    pub fn gene_outputs(&self, data: &Dataset, registry: &AbstractionRegistry) -> Result<Vec<Vec<f64>>> {
        self.genes
            .iter()
            .map(|g| g.evaluate_columns(data.columns(), data.n(), registry))
            .collect()
    }

    fn fitted(&self) -> Result<&LinearFit> {
        self.fit
            .as_ref()
            .ok_or_else(|| Error::Structural("individual has not been evaluated".into()))
    }

    /// Fused prediction `Σ β_j g_j(x) + β0` for every sample.
    pub fn predict(&self, data: &Dataset, registry: &AbstractionRegistry) -> Result<Vec<f64>> {
        let fit = self.fitted()?;
        let x = DesignMatrix::new(data.n(), self.gene_outputs(data, registry)?)?;
        linfit::predict(fit, &x)
    }

    /// Fused prediction for one full feature row.
    pub fn predict_row<A: exprtree::Abstractions + ?Sized>(&self, row: &[f64], registry: &A) -> Result<f64> {
        let fit = self.fitted()?;
        let outputs = self
            .genes
            .iter()
            .map(|g| g.evaluate(row, registry))
            .collect::<Result<Vec<_>>>()?;
        Ok(fit.predict_one(&outputs))
    }

    /// Copy with abstracted terminals replaced by their expressions.
    pub fn expanded(&self, registry: &AbstractionRegistry) -> Result<Individual> {
        Ok(Individual {
            genes: self
                .genes
                .iter()
                .map(|g| g.expand(registry))
                .collect::<Result<_>>()?,
            fit: self.fit.clone(),
            isolated_fitness: self.isolated_fitness,
        })
    }
}

/// Training data and per-generation folds shared by one population's
/// evaluations.
#[derive(Clone, Copy)]
pub struct FitnessContext<'a> {
    pub train: &'a Dataset,
    pub folds: &'a Folds,
    pub registry: &'a AbstractionRegistry,
    pub net: ElasticNet,
}

/// Fit the gene fusion on the whole training split and score it by k-fold
/// cross-validation under the shared folds.
pub fn evaluate_individual(ind: &Individual, ctx: &FitnessContext<'_>) -> Result<Individual> {
    let outputs = ind.gene_outputs(ctx.train, ctx.registry)?;
    let x = DesignMatrix::new(ctx.train.n(), outputs)?;
    let y = ctx.train.target();
    let isolated = cv_rmse(&x, y, ctx.folds, &ctx.net)?;
    let fit = ctx.net.fit(&x, y)?;
    Ok(Individual {
        genes: ind.genes.clone(),
        fit: Some(fit),
        isolated_fitness: Some(isolated),
    })
}

/// Individuals bound to one feature partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub id: String,
    pub terminal_set: TerminalSet,
    pub individuals: Vec<Individual>,
    /// Best isolated fitness after initialization and after every generation.
    pub best_fitness_history: Vec<f64>,
    pub stagnation_counter: usize,
    /// Lowest isolated fitness seen so far.
    pub best_fitness: f64,
}

impl Population {
    /// Ramped half-and-half initialization followed by evaluation.
    pub fn initialize<R: Rng + ?Sized>(
        id: impl Into<String>,
        terminal_set: TerminalSet,
        cfg: &EvolutionConfig,
        train: &Dataset,
        registry: &AbstractionRegistry,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        terminal_set.validate()?;
        let n_trees = cfg.population_size * cfg.genes_per_individual;
        let mut trees = exprtree::ramped_half_and_half(
            n_trees,
            &terminal_set,
            cfg.init_depth_range,
            cfg.max_tree_depth,
            rng,
        )?
        .into_iter();
        let individuals = (0..cfg.population_size)
            .map(|_| Individual::new(trees.by_ref().take(cfg.genes_per_individual).collect()))
            .collect();
        let mut pop = Population {
            id: id.into(),
            terminal_set,
            individuals,
            best_fitness_history: Vec::new(),
            stagnation_counter: 0,
            best_fitness: f64::INFINITY,
        };
        let folds = Folds::new(train.n(), cfg.k_folds, rng)?;
        pop.evaluate_pending(&FitnessContext {
            train,
            folds: &folds,
            registry,
            net: cfg.net(),
        })?;
        pop.best_fitness = pop.best().fitness();
        pop.best_fitness_history.push(pop.best_fitness);
        Ok(pop)
    }

    /// Evaluate every individual that has no fitness yet. Individuals are
    /// independent, so this runs in parallel with identical results.
    pub fn evaluate_pending(&mut self, ctx: &FitnessContext<'_>) -> Result<()> {
        self.individuals
            .par_iter_mut()
            .filter(|ind| !ind.is_evaluated())
            .try_for_each(|ind| {
                *ind = evaluate_individual(ind, ctx)?;
                Ok(())
            })
    }

    /// Indices ordered best first: lower fitness, then fewer nodes, then
    /// earlier position.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.individuals.len()).collect();
        idx.sort_by(|&a, &b| compare(&self.individuals, a, b));
        idx
    }

    pub fn best(&self) -> &Individual {
        &self.individuals[self.ranking()[0]]
    }

    /// Mean isolated fitness over evaluated individuals.
    pub fn mean_fitness(&self) -> f64 {
        let vals: Vec<f64> = self.individuals.iter().filter_map(|i| i.isolated_fitness).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// One generation: breed, evaluate offspring under freshly drawn folds,
    /// then update the stagnation counter.
    pub fn advance<R: Rng + ?Sized>(
        &mut self,
        cfg: &EvolutionConfig,
        train: &Dataset,
        registry: &AbstractionRegistry,
        rng: &mut R,
    ) -> Result<()> {
        let offspring = next_generation(self, cfg, rng)?;
        self.individuals = offspring;
        let folds = Folds::new(train.n(), cfg.k_folds, rng)?;
        self.evaluate_pending(&FitnessContext {
            train,
            folds: &folds,
            registry,
            net: cfg.net(),
        })?;
        update_stagnation(self);
        Ok(())
    }
}

fn compare(inds: &[Individual], a: usize, b: usize) -> std::cmp::Ordering {
    inds[a]
        .fitness()
        .total_cmp(&inds[b].fitness())
        .then(inds[a].node_count().cmp(&inds[b].node_count()))
        .then(a.cmp(&b))
}

/// Tournament of `size` uniformly drawn (with replacement) contestants;
/// returns the winner's index.
pub fn tournament_index<R: Rng + ?Sized>(pop: &Population, size: usize, rng: &mut R) -> usize {
    let n = pop.individuals.len();
    let mut winner = rng.random_range(0..n);
    for _ in 1..size {
        let c = rng.random_range(0..n);
        if compare(&pop.individuals, c, winner).is_lt() {
            winner = c;
        }
    }
    winner
}

/// Size-4 tournament selection.
pub fn select_parent<'a, R: Rng + ?Sized>(pop: &'a Population, rng: &mut R) -> &'a Individual {
    &pop.individuals[tournament_index(pop, 4, rng)]
}

/// Offspring for the next generation.
///
/// The top `max(1, top_m)` individuals (the ensemble members) are copied
/// unchanged with their cached fitness. Each remaining slot is filled by
/// crossover, mutation or reproduction with probabilities `p_c`, `p_m`,
/// `p_r`. Crossover exchanges subtrees between the two parents' genes at one
/// shared, uniformly drawn slot. Varied offspring are left unevaluated.
pub fn next_generation<R: Rng + ?Sized>(
    pop: &Population,
    cfg: &EvolutionConfig,
    rng: &mut R,
) -> Result<Vec<Individual>> {
    if pop.individuals.iter().any(|i| !i.is_evaluated()) {
        return Err(Error::Structural(format!("population {} is not fully evaluated", pop.id)));
    }
    let size = pop.individuals.len();
    let n_elite = cfg.top_m.max(1).min(size);
    let mut next: Vec<Individual> = pop.ranking()[..n_elite]
        .iter()
        .map(|&i| pop.individuals[i].clone())
        .collect();

    while next.len() < size {
        let r: f64 = rng.random();
        let p1 = &pop.individuals[tournament_index(pop, cfg.tournament_size, rng)];
        if r < cfg.p_crossover {
            let p2 = &pop.individuals[tournament_index(pop, cfg.tournament_size, rng)];
            let slot = rng.random_range(0..p1.genes.len().min(p2.genes.len()));
            let (a, b) = exprtree::subtree_crossover(&p1.genes[slot], &p2.genes[slot], cfg.max_tree_depth, rng);
            let mut c1 = p1.genes.clone();
            c1[slot] = a;
            next.push(Individual::new(c1));
            if next.len() < size {
                let mut c2 = p2.genes.clone();
                c2[slot] = b;
                next.push(Individual::new(c2));
            }
        } else if r < cfg.p_crossover + cfg.p_mutation {
            let slot = rng.random_range(0..p1.genes.len());
            let mut genes = p1.genes.clone();
            genes[slot] = exprtree::subtree_mutation(&genes[slot], &pop.terminal_set, cfg.max_tree_depth, rng);
            next.push(Individual::new(genes));
        } else {
            next.push(p1.clone());
        }
    }
    Ok(next)
}

/// Record the current best isolated fitness and update the stagnation
/// counter: reset on a relative improvement above [`IMPROVEMENT_REL_TOL`],
/// otherwise increment.
pub fn update_stagnation(pop: &mut Population) {
    let current = pop
        .individuals
        .iter()
        .map(Individual::fitness)
        .fold(f64::INFINITY, f64::min);
    record_best(pop, current);
}

pub(crate) fn record_best(pop: &mut Population, current: f64) {
    pop.best_fitness_history.push(current);
    if improves(pop.best_fitness, current) {
        pop.stagnation_counter = 0;
    } else {
        pop.stagnation_counter += 1;
    }
    pop.best_fitness = pop.best_fitness.min(current);
}

/// Whether `candidate` beats `incumbent` by more than the relative tolerance.
pub fn improves(incumbent: f64, candidate: f64) -> bool {
    if !incumbent.is_finite() {
        return candidate.is_finite();
    }
    incumbent - candidate > IMPROVEMENT_REL_TOL * incumbent.abs()
}
