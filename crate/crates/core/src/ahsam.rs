//! Stagnation-triggered symbolic abstraction.
//!
//! When every population has stagnated, each individual's fused prediction
//! vector on the training split is tested for statistically distinct
//! behavior by one-way ANOVA. Retained individuals are compressed into a
//! single expression over raw features, pruned until their standalone RMSE
//! does not exceed their population's mean isolated fitness, and injected as
//! a new terminal into every population.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evolution::{EvolutionConfig, Individual, Population};
use crate::exprtree::{Abstractions, ExprTree, Node};
use crate::linfit::{DesignMatrix, ElasticNet};

/// One-way ANOVA decomposition and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub ss_between: f64,
    pub ss_within: f64,
    pub ss_total: f64,
    /// `+∞` when the within-group sum of squares vanishes and groups differ.
    pub f_stat: f64,
    pub df1: usize,
    pub df2: usize,
    pub p_value: f64,
}

/// One-way ANOVA over `groups`: `F = (SS_between/(k−1)) / (SS_within/(N−k))`,
/// `p = 1 − F_cdf(F; k−1, N−k)` with `N` the total observation count.
pub fn one_way_anova(groups: &[&[f64]]) -> Result<AnovaResult> {
    let k = groups.len();
    if k < 2 {
        return Err(Error::Input(format!("ANOVA needs at least 2 groups, got {k}")));
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(Error::Input("ANOVA group is empty".into()));
    }
    let n_total: usize = groups.iter().map(|g| g.len()).sum();
    if n_total <= k {
        return Err(Error::Input(format!(
            "ANOVA needs more observations ({n_total}) than groups ({k})"
        )));
    }
    let means: Vec<f64> = groups
        .iter()
        .map(|g| g.iter().sum::<f64>() / g.len() as f64)
        .collect();
    let grand = groups.iter().flat_map(|g| g.iter()).sum::<f64>() / n_total as f64;
    let all_equal = means.iter().all(|m| m.to_bits() == means[0].to_bits());
    let ss_between = if all_equal {
        0.0
    } else {
        groups
            .iter()
            .zip(&means)
            .map(|(g, m)| g.len() as f64 * (m - grand).powi(2))
            .sum()
    };
    let ss_within: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    let ss_total: f64 = groups
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| (v - grand).powi(2))
        .sum();
    let df1 = k - 1;
    let df2 = n_total - k;
    let (f_stat, p_value) = if ss_within == 0.0 {
        if ss_between > 0.0 {
            (f64::INFINITY, 0.0)
        } else {
            (0.0, 1.0)
        }
    } else {
        let f = (ss_between / df1 as f64) / (ss_within / df2 as f64);
        let dist = FisherSnedecor::new(df1 as f64, df2 as f64)
            .map_err(|e| Error::Input(format!("F distribution: {e}")))?;
        (f, dist.sf(f).clamp(0.0, 1.0))
    };
    Ok(AnovaResult {
        ss_between,
        ss_within,
        ss_total,
        f_stat,
        df1,
        df2,
        p_value,
    })
}

/// A compressed individual available as a terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractedFeature {
    pub id: u32,
    pub source_population: String,
    /// Fused model over raw features only; contains no abstracted terminals.
    pub expression: ExprTree,
    pub creation_generation: usize,
}

/// Global id → abstraction map shared by all populations of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<AbstractedFeature>", into = "Vec<AbstractedFeature>")]
pub struct AbstractionRegistry {
    entries: BTreeMap<u32, AbstractedFeature>,
}

impl From<Vec<AbstractedFeature>> for AbstractionRegistry {
    fn from(v: Vec<AbstractedFeature>) -> Self {
        AbstractionRegistry {
            entries: v.into_iter().map(|f| (f.id, f)).collect(),
        }
    }
}

impl From<AbstractionRegistry> for Vec<AbstractedFeature> {
    fn from(r: AbstractionRegistry) -> Self {
        r.entries.into_values().collect()
    }
}

impl AbstractionRegistry {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_id(&self) -> u32 {
        self.entries.keys().next_back().map_or(0, |k| k + 1)
    }

    pub fn get(&self, id: u32) -> Option<&AbstractedFeature> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &AbstractedFeature> {
        self.entries.values()
    }

    pub fn insert(&mut self, feature: AbstractedFeature) -> Result<()> {
        if self.entries.contains_key(&feature.id) {
            return Err(Error::Structural(format!("abstraction z{} already registered", feature.id)));
        }
        if !feature.expression.abstractions().is_empty() {
            return Err(Error::Structural(format!("abstraction z{} is not fully expanded", feature.id)));
        }
        self.entries.insert(feature.id, feature);
        Ok(())
    }
}

impl Abstractions for AbstractionRegistry {
    fn expression(&self, id: u32) -> Option<&ExprTree> {
        self.entries.get(&id).map(|f| &f.expression)
    }
}

/// True iff there are several populations and all have stagnated for at
/// least `trigger` generations.
pub fn should_trigger(pops: &[Population], trigger: usize) -> bool {
    pops.len() >= 2 && pops.iter().all(|p| p.stagnation_counter >= trigger)
}

/// An individual retained by the filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub population: usize,
    pub index: usize,
    pub p_value: f64,
    pub fitness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    /// Sorted by isolated fitness, best first.
    pub candidates: Vec<Candidate>,
    /// The per-population best individuals were substituted because the
    /// test was inapplicable or retained nothing.
    pub fallback: bool,
}

/// Per-individual significance filter.
///
/// Each individual's fused training predictions form one group. Individual
/// `i` is tested by a two-group one-way ANOVA of its group against the
/// pooled groups of all other individuals; it is retained when `p ≤ alpha`.
/// When the test is inapplicable (fewer than two individuals, or no more
/// pooled observations than individuals) or nothing is retained, the best
/// individual of each population is returned instead.
pub fn anova_filter(
    pops: &[Population],
    train: &Dataset,
    registry: &AbstractionRegistry,
    alpha: f64,
) -> Result<FilterOutcome> {
    let mut refs = Vec::new();
    let mut preds = Vec::new();
    for (p, pop) in pops.iter().enumerate() {
        for (i, ind) in pop.individuals.iter().enumerate() {
            refs.push((p, i, ind.fitness()));
            preds.push(ind.predict(train, registry)?);
        }
    }
    let k = preds.len();
    let n_obs = k * train.n();
    let mut candidates = Vec::new();
    if k >= 2 && n_obs > k {
        for i in 0..k {
            let rest: Vec<f64> = preds
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            let res = one_way_anova(&[&preds[i], &rest])?;
            if res.p_value <= alpha {
                let (population, index, fitness) = refs[i];
                candidates.push(Candidate {
                    population,
                    index,
                    p_value: res.p_value,
                    fitness,
                });
            }
        }
    }
    let fallback = candidates.is_empty();
    if fallback {
        for (p, pop) in pops.iter().enumerate() {
            let index = pop.ranking()[0];
            candidates.push(Candidate {
                population: p,
                index,
                p_value: f64::NAN,
                fitness: pop.individuals[index].fitness(),
            });
        }
    }
    candidates.sort_by(|a, b| a.fitness.total_cmp(&b.fitness).then(a.population.cmp(&b.population)));
    Ok(FilterOutcome { candidates, fallback })
}

/// Materialize `Σ β_j·gene_j + β0` as one expression tree with every
/// abstracted terminal expanded. Zero-weight genes are omitted.
pub fn compress(
    candidate: &Individual,
    registry: &AbstractionRegistry,
    id: u32,
    source_population: &str,
    generation: usize,
) -> Result<AbstractedFeature> {
    let fit = candidate
        .fit
        .as_ref()
        .ok_or_else(|| Error::Structural("candidate has no fitted weights".into()))?;
    let mut sum: Option<Node> = None;
    for (beta, gene) in fit.beta.iter().zip(&candidate.genes) {
        if *beta == 0.0 {
            continue;
        }
        let term = Node::mul(Node::Const(*beta), gene.expand(registry)?.into_root());
        sum = Some(match sum {
            None => term,
            Some(acc) => Node::add(acc, term),
        });
    }
    let root = match sum {
        None => Node::Const(fit.intercept),
        Some(acc) => Node::add(acc, Node::Const(fit.intercept)),
    };
    Ok(AbstractedFeature {
        id,
        source_population: source_population.to_string(),
        expression: ExprTree::new(root),
        creation_generation: generation,
    })
}

/// Training RMSE of the least-squares model `y ≈ a·z + b`.
pub fn standalone_rmse(expression: &ExprTree, train: &Dataset) -> Result<f64> {
    let z = expression.evaluate_columns(train.columns(), train.n(), &crate::exprtree::NoAbstractions)?;
    let x = DesignMatrix::new(train.n(), vec![z])?;
    Ok(ElasticNet::ols().fit(&x, train.target())?.train_rmse)
}

/// Result of validating one abstraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    /// The (possibly pruned) abstraction, or `None` if rejected.
    pub accepted: Option<AbstractedFeature>,
    pub rounds: usize,
    /// Population mean isolated fitness the abstraction must not exceed.
    pub baseline: f64,
    pub initial_rmse: f64,
    pub final_rmse: f64,
    /// Standalone RMSE on the validation split of the final expression.
    pub val_rmse: f64,
}

/// Accept `z` if its standalone training RMSE is at most the population's
/// mean isolated fitness. Otherwise repeatedly delete the one subtree whose
/// removal (parent operator replaced by the sibling) gives the lowest RMSE,
/// accepting on the first round that reaches the baseline, for at most
/// `max_rounds` rounds.
pub fn prune_and_validate(
    z: &AbstractedFeature,
    pop: &Population,
    train: &Dataset,
    val: &Dataset,
    max_rounds: usize,
) -> Result<PruneOutcome> {
    let baseline = pop.mean_fitness();
    let initial_rmse = standalone_rmse(&z.expression, train)?;
    let mut current = z.expression.clone();
    let mut current_rmse = initial_rmse;
    let mut rounds = 0;
    while current_rmse > baseline && rounds < max_rounds {
        let Some((tree, rmse)) = best_removal(&current, train)? else {
            break;
        };
        rounds += 1;
        current = tree;
        current_rmse = rmse;
    }
    let val_rmse = standalone_rmse(&current, val)?;
    let accepted = (current_rmse <= baseline).then(|| AbstractedFeature {
        expression: current,
        ..z.clone()
    });
    Ok(PruneOutcome {
        accepted,
        rounds,
        baseline,
        initial_rmse,
        final_rmse: current_rmse,
        val_rmse,
    })
}

fn best_removal(tree: &ExprTree, train: &Dataset) -> Result<Option<(ExprTree, f64)>> {
    let mut best: Option<(ExprTree, f64)> = None;
    for idx in 0..tree.node_count() {
        let Some(Node::Op(_, left, right)) = tree.root().nth(idx) else {
            continue;
        };
        for keep in [right, left] {
            let pruned = ExprTree::new(tree.root().with_replaced(idx, (**keep).clone()));
            let rmse = standalone_rmse(&pruned, train)?;
            if best.as_ref().is_none_or(|(_, b)| rmse < *b) {
                best = Some((pruned, rmse));
            }
        }
    }
    Ok(best)
}

/// Register `z` and add it to every population's terminal set.
pub fn inject(z: AbstractedFeature, pops: &mut [Population], registry: &mut AbstractionRegistry) -> Result<()> {
    let id = z.id;
    registry.insert(z)?;
    for pop in pops {
        if !pop.terminal_set.abstractions.contains(&id) {
            pop.terminal_set.abstractions.push(id);
        }
    }
    Ok(())
}

/// What happened during one activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationLog {
    pub generation: usize,
    pub n_candidates: usize,
    pub fallback: bool,
    pub accepted: Vec<u32>,
    pub rejected: usize,
    /// Candidates skipped because their expression was already registered.
    pub duplicates: usize,
    /// Pruning rounds spent per examined candidate.
    pub pruning_rounds: Vec<usize>,
}

/// Full activation: filter, compress, prune, inject (best candidates first,
/// at most `cfg.max_abstractions_per_activation` accepted), then reset all
/// stagnation counters.
pub fn activate(
    pops: &mut [Population],
    registry: &mut AbstractionRegistry,
    train: &Dataset,
    val: &Dataset,
    cfg: &EvolutionConfig,
    generation: usize,
) -> Result<ActivationLog> {
    let filter = anova_filter(pops, train, registry, cfg.alpha)?;
    let mut log = ActivationLog {
        generation,
        n_candidates: filter.candidates.len(),
        fallback: filter.fallback,
        accepted: Vec::new(),
        rejected: 0,
        duplicates: 0,
        pruning_rounds: Vec::new(),
    };
    for cand in &filter.candidates {
        if log.accepted.len() >= cfg.max_abstractions_per_activation {
            break;
        }
        let pop = &pops[cand.population];
        let z = compress(
            &pop.individuals[cand.index],
            registry,
            registry.next_id(),
            &pop.id,
            generation,
        )?;
        let outcome = prune_and_validate(&z, pop, train, val, cfg.prune_rounds)?;
        log.pruning_rounds.push(outcome.rounds);
        match outcome.accepted {
            Some(feature) if registry.iter().any(|f| f.expression == feature.expression) => {
                log.duplicates += 1;
            }
            Some(feature) => {
                log.accepted.push(feature.id);
                inject(feature, pops, registry)?;
            }
            None => log.rejected += 1,
        }
    }
    for pop in pops.iter_mut() {
        pop.stagnation_counter = 0;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, synth_superposition};
    use crate::exprtree::{self, TerminalSet};
    use crate::linfit::LinearFit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn individual(genes: Vec<Node>, beta: Vec<f64>, intercept: f64, fitness: f64) -> Individual {
        let n = beta.len();
        Individual {
            genes: genes.into_iter().map(ExprTree::new).collect(),
            fit: Some(LinearFit {
                beta,
                intercept,
                ..LinearFit::constant(n, 0.0)
            }),
            isolated_fitness: Some(fitness),
        }
    }

    fn population(id: &str, individuals: Vec<Individual>, counter: usize) -> Population {
        Population {
            id: id.into(),
            terminal_set: TerminalSet::new(vec![0, 1], (-10.0, 10.0)).unwrap(),
            individuals,
            best_fitness_history: vec![1.0],
            stagnation_counter: counter,
            best_fitness: 1.0,
        }
    }

    #[test]
    fn trigger_requires_all_populations() {
        let mk = |c| population("p", vec![], c);
        assert!(should_trigger(&[mk(25), mk(25), mk(25)], 25));
        assert!(!should_trigger(&[mk(25), mk(25), mk(24)], 25));
        assert!(!should_trigger(&[mk(1000)], 25));
    }

    #[test]
    fn anova_of_separated_constant_groups() {
        let r = one_way_anova(&[&[1.0, 1.0, 1.0], &[5.0, 5.0, 5.0]]).unwrap();
        assert!((r.ss_between - 24.0).abs() < 1e-12);
        assert_eq!(r.ss_within, 0.0);
        assert!(r.f_stat.is_infinite());
        assert_eq!(r.p_value, 0.0);
    }

    #[test]
    fn anova_of_identical_groups() {
        let g = [1.0, 2.5, 4.0];
        let r = one_way_anova(&[&g, &g, &g]).unwrap();
        assert_eq!((r.ss_between, r.f_stat, r.p_value), (0.0, 0.0, 1.0));
    }

    #[test]
    fn anova_preconditions() {
        assert!(one_way_anova(&[&[1.0, 2.0]]).is_err());
        assert!(one_way_anova(&[&[1.0], &[2.0]]).is_err());
        assert!(one_way_anova(&[&[1.0, 2.0], &[]]).is_err());
    }

    #[test]
    fn identical_predictors_fall_back_to_population_bests() {
        let train = synth_superposition(40, 0.3, 1).unwrap();
        let reg = AbstractionRegistry::default();
        let mk = |f| individual(vec![Node::Var(data::FC)], vec![0.1], 1.0, f);
        let pops = vec![
            population("a", vec![mk(2.0), mk(1.0)], 25),
            population("b", vec![mk(3.0), mk(0.5)], 25),
        ];
        let out = anova_filter(&pops, &train, &reg, 0.05).unwrap();
        assert!(out.fallback);
        let picked: Vec<(usize, usize)> = out.candidates.iter().map(|c| (c.population, c.index)).collect();
        assert_eq!(picked, vec![(1, 1), (0, 1)]);
    }

    #[test]
    fn shifted_predictor_is_retained() {
        let train = synth_superposition(60, 0.3, 2).unwrap();
        let reg = AbstractionRegistry::default();
        let base = |f| individual(vec![Node::Var(data::FC)], vec![0.05], 1.0, f);
        let shifted = individual(vec![Node::Var(data::FC)], vec![0.05], 30.0, 0.7);
        let pops = vec![
            population("a", vec![base(1.0), base(1.1), shifted], 25),
            population("b", vec![base(1.2), base(1.3)], 25),
        ];
        let out = anova_filter(&pops, &train, &reg, 0.05).unwrap();
        assert!(!out.fallback);
        assert_eq!(out.candidates[0].population, 0);
        assert_eq!(out.candidates[0].index, 2);
        assert!(out.candidates[0].p_value < 1e-6);
    }

    #[test]
    fn compress_linear_candidate() {
        let reg = AbstractionRegistry::default();
        let cand = individual(vec![Node::Var(0)], vec![2.0], 1.0, 0.0);
        let z = compress(&cand, &reg, 0, "p", 3).unwrap();
        let expected = Node::add(Node::mul(Node::Const(2.0), Node::Var(0)), Node::Const(1.0));
        assert_eq!(z.expression.root(), &expected);
        assert_eq!(z.expression.evaluate(&[4.0], &reg).unwrap(), 9.0);
    }

    #[test]
    fn compress_expands_nested_abstractions() {
        let mut reg = AbstractionRegistry::default();
        let inner = ExprTree::new(Node::mul(Node::Var(1), Node::Const(3.0)));
        reg.insert(AbstractedFeature {
            id: 1,
            source_population: "q".into(),
            expression: inner.clone(),
            creation_generation: 0,
        })
        .unwrap();
        let cand = individual(vec![Node::add(Node::Abstracted(1), Node::Var(0))], vec![1.5], 0.0, 0.0);
        let z = compress(&cand, &reg, 2, "p", 9).unwrap();
        assert!(z.expression.abstractions().is_empty());
        assert!(z.expression.variables().contains(&1));
    }

    #[test]
    fn compressed_tree_reproduces_fused_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ds = synth_superposition(100, 0.3, 3).unwrap();
        let mut reg = AbstractionRegistry::default();
        let terms = TerminalSet::new(vec![data::FC, data::RHO, data::A_OVER_D], (-10.0, 10.0)).unwrap();
        let z1 = exprtree::grow_init(&terms, 4, &mut rng).unwrap();
        reg.insert(AbstractedFeature {
            id: 0,
            source_population: "x".into(),
            expression: z1,
            creation_generation: 0,
        })
        .unwrap();
        let mut with_z = terms.clone();
        with_z.abstractions.push(0);
        for _ in 0..20 {
            let genes: Vec<Node> = (0..3)
                .map(|_| exprtree::grow_init(&with_z, 5, &mut rng).unwrap().into_root())
                .collect();
            let beta = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let cand = individual(genes, beta, rng.random_range(-1.0..1.0), 1.0);
            let z = compress(&cand, &reg, 1, "p", 0).unwrap();
            let fused = cand.predict(&ds, &reg).unwrap();
            for i in 0..ds.n() {
                let v = z.expression.evaluate(&ds.row(i), &reg).unwrap();
                assert!((v - fused[i]).abs() <= 1e-9 * fused[i].abs().max(1.0), "{v} vs {}", fused[i]);
            }
        }
    }

    #[test]
    fn exact_abstraction_accepted_unpruned() {
        let ds = synth_superposition(50, 0.0, 4).unwrap();
        // z = y exactly via a column equal to the target is not available, so
        // use the noise-free ground truth expression.
        let fc_term = Node::div(
            Node::mul(Node::Const(0.5), Node::Var(data::FC)),
            Node::mul(
                Node::add(Node::Const(4.0), Node::mul(Node::Const(0.05), Node::Var(data::FC))),
                Node::add(Node::Const(1.0), Node::mul(Node::Const(0.05), Node::Var(data::A_OVER_D))),
            ),
        );
        let steel = Node::div(
            Node::mul(Node::Const(2.0), Node::Var(data::RHO)),
            Node::add(Node::Const(2.0), Node::Var(data::RHO)),
        );
        let fiber = Node::div(
            Node::mul(Node::Var(data::VF), Node::Var(data::LF_OVER_DF)),
            Node::add(
                Node::Const(20.0),
                Node::mul(Node::Const(0.1), Node::mul(Node::Var(data::VF), Node::Var(data::LF_OVER_DF))),
            ),
        );
        let z = AbstractedFeature {
            id: 0,
            source_population: "p".into(),
            expression: ExprTree::new(Node::add(Node::add(fc_term, steel), fiber)),
            creation_generation: 0,
        };
        let pop = population("p", vec![individual(vec![Node::Var(0)], vec![1.0], 0.0, 0.5)], 0);
        let out = prune_and_validate(&z, &pop, &ds, &ds, 10).unwrap();
        assert!(out.initial_rmse < 1e-9);
        assert_eq!(out.rounds, 0);
        assert_eq!(out.accepted.unwrap().expression, z.expression);
    }

    #[test]
    fn hopeless_abstraction_rejected() {
        let ds = synth_superposition(50, 0.3, 5).unwrap();
        let z = AbstractedFeature {
            id: 0,
            source_population: "p".into(),
            expression: ExprTree::new(Node::add(Node::Var(data::FF), Node::Var(data::DF_AGG))),
            creation_generation: 0,
        };
        let pop = population("p", vec![individual(vec![Node::Var(0)], vec![1.0], 0.0, 1e-3)], 0);
        let out = prune_and_validate(&z, &pop, &ds, &ds, 10).unwrap();
        assert!(out.accepted.is_none());
        assert!(out.rounds <= 10);
    }

    #[test]
    fn injection_updates_every_population() {
        let mut pops = vec![population("a", vec![], 0), population("b", vec![], 0)];
        let mut reg = AbstractionRegistry::default();
        let expr = ExprTree::new(Node::mul(Node::Var(0), Node::Var(1)));
        let z = AbstractedFeature {
            id: 4,
            source_population: "a".into(),
            expression: expr.clone(),
            creation_generation: 7,
        };
        inject(z.clone(), &mut pops, &mut reg).unwrap();
        assert!(pops.iter().all(|p| p.terminal_set.abstractions == vec![4]));
        assert_eq!(reg.expression(4), Some(&expr));
        assert!(matches!(inject(z, &mut pops, &mut reg), Err(Error::Structural(_))));
    }

    #[test]
    fn injected_terminal_appears_under_mutation() {
        let mut pops = vec![population("a", vec![], 0)];
        let mut reg = AbstractionRegistry::default();
        let z = AbstractedFeature {
            id: 0,
            source_population: "a".into(),
            expression: ExprTree::new(Node::Var(0)),
            creation_generation: 0,
        };
        inject(z, &mut pops, &mut reg).unwrap();
        let terms = &pops[0].terminal_set;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tree = ExprTree::new(Node::Var(1));
        let mut seen = false;
        for _ in 0..200 {
            tree = exprtree::subtree_mutation(&tree, terms, 15, &mut rng);
            if !tree.abstractions().is_empty() {
                seen = true;
                break;
            }
        }
        assert!(seen);
    }

    #[test]
    fn registry_serde_round_trip() {
        let mut reg = AbstractionRegistry::default();
        reg.insert(AbstractedFeature {
            id: 2,
            source_population: "s".into(),
            expression: ExprTree::new(Node::sub(Node::Var(3), Node::Const(0.25))),
            creation_generation: 11,
        })
        .unwrap();
        let json = serde_json::to_string(&reg).unwrap();
        let back: AbstractionRegistry = serde_json::from_str(&json).unwrap();
        assert_eq!(back, reg);
        assert_eq!(back.next_id(), 3);
    }
}
