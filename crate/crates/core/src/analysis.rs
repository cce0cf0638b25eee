//! Statistics over repeated runs and post-hoc interrogation of final models.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{self, quantile_sorted};
use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::exprtree::{ExprTree, Node, NoAbstractions, TreeMetrics};

/// Sample size from which the normal approximation replaces exact
/// enumeration.
pub const NORMAL_APPROX_MIN_N: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub mean: f64,
    /// Sample SD; 0 for a single value.
    pub sd: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Input("cannot summarize an empty sample".into()));
    }
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    Ok(Summary {
        n,
        median: quantile_sorted(&sorted, 0.5),
        q1,
        q3,
        iqr: q3 - q1,
        mean,
        sd,
    })
}

/// Average ranks (1-based) with ties sharing the mean rank; also returns the
/// tie-group sizes.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

fn tie_term(ties: &[usize]) -> f64 {
    ties.iter().map(|&t| (t * t * t - t) as f64).sum()
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Exact p-value or normal approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PMethod {
    /// Exact below [`NORMAL_APPROX_MIN_N`], normal approximation otherwise.
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    /// Rank sum of the first sample.
    pub statistic: f64,
    /// Mann–Whitney U of the first sample.
    pub u: f64,
    pub p_two_sided: f64,
    pub exact: bool,
}

/// Two-sided Wilcoxon rank-sum test.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    wilcoxon_rank_sum_with(a, b, PMethod::Auto)
}

pub fn wilcoxon_rank_sum_with(a: &[f64], b: &[f64], method: PMethod) -> Result<RankSumResult> {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::Input("rank-sum test needs two non-empty samples".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = average_ranks(&pooled);
    let w: f64 = ranks[..n1].iter().sum();
    let n = (n1 + n2) as f64;
    let mu = n1 as f64 * (n + 1.0) / 2.0;
    let exact = match method {
        PMethod::Auto => n1.max(n2) < NORMAL_APPROX_MIN_N,
        PMethod::Exact => true,
        PMethod::Normal => false,
    };
    let p = if exact {
        // Doubled average ranks are integers.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let dist = subset_sum_counts(&doubled, Some(n1));
        let total: f64 = dist.iter().sum();
        let obs = (2.0 * w).round() as i64;
        let centre = n1 as i64 * (n1 + n2 + 1) as i64;
        let dev = (obs - centre).abs();
        let extreme: f64 = dist
            .iter()
            .enumerate()
            .filter(|(s, _)| (*s as i64 - centre).abs() >= dev)
            .map(|(_, c)| c)
            .sum();
        extreme / total
    } else {
        let var = n1 as f64 * n2 as f64 / 12.0 * ((n + 1.0) - tie_term(&ties) / (n * (n - 1.0)));
        if var <= 0.0 {
            1.0
        } else {
            let z = ((w - mu).abs() - 0.5).max(0.0) / var.sqrt();
            2.0 * std_normal().sf(z)
        }
    };
    Ok(RankSumResult {
        statistic: w,
        u: w - n1 as f64 * (n1 as f64 + 1.0) / 2.0,
        p_two_sided: p.min(1.0),
        exact,
    })
}

/// Number of subsets (optionally of fixed size) reaching each sum.
fn subset_sum_counts(weights: &[usize], size: Option<usize>) -> Vec<f64> {
    let max_sum: usize = weights.iter().sum();
    match size {
        None => {
            let mut dp = vec![0.0f64; max_sum + 1];
            dp[0] = 1.0;
            for &w in weights {
                for s in (w..=max_sum).rev() {
                    dp[s] += dp[s - w];
                }
            }
            dp
        }
        Some(k) => {
            // dp[j][s]: subsets of size j with sum s.
            let mut dp = vec![vec![0.0f64; max_sum + 1]; k + 1];
            dp[0][0] = 1.0;
            for &w in weights {
                for j in (1..=k).rev() {
                    for s in (w..=max_sum).rev() {
                        let add = dp[j - 1][s - w];
                        if add != 0.0 {
                            dp[j][s] += add;
                        }
                    }
                }
            }
            dp.swap_remove(k)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alternative {
    /// Median of the differences is positive.
    Greater,
    TwoSided,
}

/// Paired comparison of per-run RMSEs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    /// `RMSE_baseline − RMSE_candidate` per run; positive favors the candidate.
    pub deltas: Vec<f64>,
    /// Non-zero differences entering the test.
    pub n_used: usize,
    /// Sum of ranks of positive differences.
    pub w_statistic: f64,
    pub p_value: f64,
    /// `2W / (n(n+1)/2) − 1`.
    pub rank_biserial: f64,
    /// Fraction of all runs with a positive difference.
    pub win_fraction: f64,
    pub alternative: Alternative,
    pub exact: bool,
}

/// Wilcoxon signed-rank test; zero differences are dropped.
pub fn wilcoxon_signed_rank(deltas: &[f64], alternative: Alternative) -> Result<PairedTestResult> {
    wilcoxon_signed_rank_with(deltas, alternative, PMethod::Auto)
}

pub fn wilcoxon_signed_rank_with(
    deltas: &[f64],
    alternative: Alternative,
    method: PMethod,
) -> Result<PairedTestResult> {
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::Input("non-finite paired difference".into()));
    }
    let nonzero: Vec<f64> = deltas.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return Err(Error::Input("signed-rank test needs at least one non-zero difference".into()));
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w: f64 = ranks
        .iter()
        .zip(&nonzero)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| r)
        .sum();
    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let exact = match method {
        PMethod::Auto => n < NORMAL_APPROX_MIN_N,
        PMethod::Exact => true,
        PMethod::Normal => false,
    };
    let p = if exact {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let dist = subset_sum_counts(&doubled, None);
        let total: f64 = dist.iter().sum();
        let obs = (2.0 * w).round() as i64;
        // Doubled statistic has mean n(n+1)/2.
        let centre2 = (n * (n + 1) / 2) as i64;
        let tail: f64 = dist
            .iter()
            .enumerate()
            .filter(|(s, _)| match alternative {
                Alternative::Greater => *s as i64 >= obs,
                Alternative::TwoSided => (*s as i64 - centre2).abs() >= (obs - centre2).abs(),
            })
            .map(|(_, c)| c)
            .sum();
        tail / total
    } else {
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term(&ties) / 48.0;
        if var <= 0.0 {
            1.0
        } else {
            let sd = var.sqrt();
            match alternative {
                Alternative::Greater => std_normal().sf((w - mu - 0.5) / sd),
                Alternative::TwoSided => 2.0 * std_normal().sf(((w - mu).abs() - 0.5).max(0.0) / sd),
            }
        }
    };
    let wins = deltas.iter().filter(|d| **d > 0.0).count();
    Ok(PairedTestResult {
        deltas: deltas.to_vec(),
        n_used: n,
        w_statistic: w,
        p_value: p.min(1.0),
        rank_biserial: 2.0 * w / (nf * (nf + 1.0) / 2.0) - 1.0,
        win_fraction: wins as f64 / deltas.len() as f64,
        alternative,
        exact,
    })
}

/// Percentile bootstrap confidence interval for the mean.
pub fn bootstrap_ci_mean(values: &[f64], n_boot: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Input("bootstrap needs at least 2 values".into()));
    }
    if n_boot == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Input(format!("invalid bootstrap settings n_boot={n_boot}, level={level}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..n_boot)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&means, tail), quantile_sorted(&means, 1.0 - tail)))
}

/// Anything that maps a raw feature row to a prediction.
pub trait Predictor {
    fn predict_row(&self, row: &[f64]) -> Result<f64>;
}

impl Predictor for EnsembleModel {
    fn predict_row(&self, row: &[f64]) -> Result<f64> {
        EnsembleModel::predict_row(self, row)
    }
}

/// Adapter for closed-form functions.
pub struct FnPredictor<F>(pub F);

impl<F: Fn(&[f64]) -> f64> Predictor for FnPredictor<F> {
    fn predict_row(&self, row: &[f64]) -> Result<f64> {
        Ok((self.0)(row))
    }
}

/// One-point elasticity by forward difference:
/// `[f(x with x_i·(1+ε)) − f(x)] / (ε·f(x))`.
pub fn elasticity<P: Predictor + ?Sized>(model: &P, x: &[f64], variable: usize, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Input(format!("epsilon must be positive, got {epsilon}")));
    }
    if variable >= x.len() {
        return Err(Error::Input(format!("variable {variable} outside point of length {}", x.len())));
    }
    let base = model.predict_row(x)?;
    if base == 0.0 {
        return Err(Error::UndefinedElasticity);
    }
    let mut bumped = x.to_vec();
    bumped[variable] *= 1.0 + epsilon;
    let moved = model.predict_row(&bumped)?;
    Ok((moved - base) / (epsilon * base))
}

/// Elasticities of one variable across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticityResult {
    pub variable: String,
    pub epsilon: f64,
    pub elasticities: Vec<f64>,
    pub median: f64,
    pub iqr: f64,
    pub mean: f64,
    pub sd: f64,
}

impl ElasticityResult {
    pub fn from_runs(variable: &str, epsilon: f64, elasticities: Vec<f64>) -> Result<Self> {
        let s = summarize(&elasticities)?;
        Ok(ElasticityResult {
            variable: variable.to_string(),
            epsilon,
            elasticities,
            median: s.median,
            iqr: s.iqr,
            mean: s.mean,
            sd: s.sd,
        })
    }
}

/// Physical mechanism a model part is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Concrete,
    Steel,
    Fiber,
    Mixed,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::Concrete, Mechanism::Steel, Mechanism::Fiber, Mechanism::Mixed];

    /// Mechanism named by a population id, if any.
    pub fn of_population(id: &str) -> Option<Mechanism> {
        let id = id.to_ascii_lowercase();
        if id.contains("concrete") {
            Some(Mechanism::Concrete)
        } else if id.contains("steel") {
            Some(Mechanism::Steel)
        } else if id.contains("fiber") || id.contains("fibre") {
            Some(Mechanism::Fiber)
        } else {
            None
        }
    }

    /// Mechanism owning a raw feature; `None` for shared geometry columns.
    pub fn of_feature(index: usize) -> Option<Mechanism> {
        match index {
            data::FC | data::DF_AGG => Some(Mechanism::Concrete),
            data::RHO => Some(Mechanism::Steel),
            data::VF | data::LF_OVER_DF | data::FF => Some(Mechanism::Fiber),
            _ => None,
        }
    }

    /// Owner of a gene: the single mechanism among its non-geometry
    /// variables, otherwise `Mixed`.
    pub fn of_gene(gene: &ExprTree) -> Mechanism {
        let owners: std::collections::BTreeSet<Mechanism> =
            gene.variables().into_iter().filter_map(Mechanism::of_feature).collect();
        match owners.len() {
            1 => *owners.iter().next().expect("one owner"),
            _ => Mechanism::Mixed,
        }
    }
}

/// Additive attribution of a prediction at one operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionBreakdown {
    /// Absolute contribution per mechanism (response units).
    pub contributions: BTreeMap<Mechanism, f64>,
    /// Share of `|contribution|` in percent; sums to 100 unless all
    /// contributions vanish.
    pub shares: BTreeMap<Mechanism, f64>,
    pub intercept: f64,
    pub prediction: f64,
}

/// Attribute `model(x)` to mechanisms.
///
/// Members from a mechanism-named population contribute
/// `weight × member prediction`. Members from other populations (the
/// single-population baseline) are split gene by gene:
/// `weight × β_j × gene_j(x)` goes to the gene's owning mechanism, and their
/// own intercepts join the ensemble intercept.
pub fn mechanism_contributions(model: &EnsembleModel, x: &[f64]) -> Result<ContributionBreakdown> {
    let mut contributions: BTreeMap<Mechanism, f64> = Mechanism::ALL.iter().map(|m| (*m, 0.0)).collect();
    let mut intercept = model.fusion.intercept;
    for (member, &w) in model.members.iter().zip(&model.fusion.beta) {
        if w == 0.0 {
            continue;
        }
        if let Some(mech) = Mechanism::of_population(&member.population) {
            *contributions.get_mut(&mech).expect("all mechanisms present") += w * member.predict_row(x)?;
            continue;
        }
        let fit = member
            .individual
            .fit
            .as_ref()
            .ok_or_else(|| Error::Structural("ensemble member without fitted weights".into()))?;
        intercept += w * fit.intercept;
        for (gene, &beta) in member.individual.genes.iter().zip(&fit.beta) {
            if beta == 0.0 {
                continue;
            }
            let value = gene.evaluate(x, &NoAbstractions)?;
            *contributions.get_mut(&Mechanism::of_gene(gene)).expect("all mechanisms present") += w * beta * value;
        }
    }
    let total_abs: f64 = contributions.values().map(|v| v.abs()).sum();
    let shares = contributions
        .iter()
        .map(|(m, v)| (*m, if total_abs > 0.0 { 100.0 * v.abs() / total_abs } else { 0.0 }))
        .collect();
    Ok(ContributionBreakdown {
        prediction: model.predict_row(x)?,
        contributions,
        shares,
        intercept,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parsimony {
    /// Top-level additive terms of the expanded closed form, intercept
    /// included when non-zero.
    pub n_terms: usize,
    pub tree_size_nodes: usize,
    pub operator_count: usize,
}

/// The model as one expression: `Σ_m Σ_j (w_m β_mj)·gene_mj + c` with
/// `c = w_0 + Σ_m w_m β_m0`; zero-coefficient terms are dropped.
pub fn closed_form(model: &EnsembleModel) -> Result<(ExprTree, usize)> {
    let mut constant = model.fusion.intercept;
    let mut sum: Option<Node> = None;
    let mut terms = 0;
    for (member, &w) in model.members.iter().zip(&model.fusion.beta) {
        if w == 0.0 {
            continue;
        }
        let fit = member
            .individual
            .fit
            .as_ref()
            .ok_or_else(|| Error::Structural("ensemble member without fitted weights".into()))?;
        constant += w * fit.intercept;
        for (gene, &beta) in member.individual.genes.iter().zip(&fit.beta) {
            let coef = w * beta;
            if coef == 0.0 {
                continue;
            }
            terms += 1;
            let term = Node::mul(Node::Const(coef), gene.root().clone());
            sum = Some(match sum {
                None => term,
                Some(acc) => Node::add(acc, term),
            });
        }
    }
    let root = match sum {
        None => {
            terms = 1;
            Node::Const(constant)
        }
        Some(acc) if constant != 0.0 => {
            terms += 1;
            Node::add(acc, Node::Const(constant))
        }
        Some(acc) => acc,
    };
    Ok((ExprTree::new(root), terms))
}

pub fn parsimony(model: &EnsembleModel) -> Result<Parsimony> {
    let (tree, n_terms) = closed_form(model)?;
    let TreeMetrics {
        node_count,
        operator_count,
        ..
    } = tree.metrics();
    Ok(Parsimony {
        n_terms,
        tree_size_nodes: node_count,
        operator_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::EnsembleMember;
    use crate::evolution::Individual;
    use crate::linfit::LinearFit;
    use proptest::prelude::*;

    fn lf(beta: Vec<f64>, intercept: f64) -> LinearFit {
        let n = beta.len();
        LinearFit {
            beta,
            intercept,
            ..LinearFit::constant(n, 0.0)
        }
    }

    fn model(members: Vec<(&str, Vec<Node>, Vec<f64>, f64)>, weights: Vec<f64>, intercept: f64) -> EnsembleModel {
        EnsembleModel {
            members: members
                .into_iter()
                .map(|(p, genes, beta, b0)| EnsembleMember {
                    population: p.into(),
                    individual: Individual {
                        genes: genes.into_iter().map(ExprTree::new).collect(),
                        fit: Some(lf(beta, b0)),
                        isolated_fitness: Some(1.0),
                    },
                })
                .collect(),
            fusion: lf(weights, intercept),
            train_rmse: 0.0,
            val_rmse: 0.0,
        }
    }

    /// Exact two-sided rank-sum p by enumerating every assignment.
    fn rank_sum_enumeration(a: &[f64], b: &[f64]) -> f64 {
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let (ranks, _) = average_ranks(&pooled);
        let n = pooled.len();
        let n1 = a.len();
        let obs: f64 = ranks[..n1].iter().sum();
        let mu = n1 as f64 * (n as f64 + 1.0) / 2.0;
        let (mut hit, mut total) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != n1 {
                continue;
            }
            total += 1;
            let s: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
            if (s - mu).abs() >= (obs - mu).abs() - 1e-9 {
                hit += 1;
            }
        }
        hit as f64 / total as f64
    }

    /// Exact signed-rank p by enumerating every sign pattern.
    fn signed_rank_enumeration(d: &[f64], alt: Alternative) -> f64 {
        let nz: Vec<f64> = d.iter().copied().filter(|x| *x != 0.0).collect();
        let abs: Vec<f64> = nz.iter().map(|x| x.abs()).collect();
        let (ranks, _) = average_ranks(&abs);
        let n = nz.len();
        let obs: f64 = (0..n).filter(|&i| nz[i] > 0.0).map(|i| ranks[i]).sum();
        let mu = n as f64 * (n as f64 + 1.0) / 4.0;
        let mut hit = 0u64;
        for mask in 0u32..(1 << n) {
            let s: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
            let extreme = match alt {
                Alternative::Greater => s >= obs - 1e-9,
                Alternative::TwoSided => (s - mu).abs() >= (obs - mu).abs() - 1e-9,
            };
            if extreme {
                hit += 1;
            }
        }
        hit as f64 / (1u64 << n) as f64
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.median, s.mean, s.sd), (2.0, 2.0, 1.0));
        let c = summarize(&[4.0; 6]).unwrap();
        assert_eq!((c.iqr, c.sd), (0.0, 0.0));
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn summary_matches_brute_force_on_thirty_values() {
        let v: Vec<f64> = (0..30).map(|i| 1.0 + ((i * 37) % 30) as f64 * 0.013 + (i as f64).sin() * 0.1).collect();
        let s = summarize(&v).unwrap();
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // type-7 positions for n = 30: 7.25, 14.5, 21.75 (0-based)
        let q1 = sorted[7] + 0.25 * (sorted[8] - sorted[7]);
        let med = 0.5 * (sorted[14] + sorted[15]);
        let q3 = sorted[21] + 0.75 * (sorted[22] - sorted[21]);
        let mean = v.iter().sum::<f64>() / 30.0;
        let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 29.0).sqrt();
        assert!((s.median - med).abs() < 1e-12);
        assert!((s.iqr - (q3 - q1)).abs() < 1e-12);
        assert!((s.mean - mean).abs() < 1e-12);
        assert!((s.sd - sd).abs() < 1e-12);
    }

    #[test]
    fn rank_sum_most_extreme_three_vs_three() {
        let r = wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!(r.exact);
        assert_eq!(r.statistic, 6.0);
        assert!((r.p_two_sided - 0.1).abs() < 1e-12);
    }

    #[test]
    fn rank_sum_identical_samples() {
        let a = [1.0, 2.0, 2.0, 5.0];
        assert!((wilcoxon_rank_sum(&a, &a).unwrap().p_two_sided - 1.0).abs() < 1e-12);
        let big: Vec<f64> = (0..20).map(|i| (i % 7) as f64).collect();
        assert!((wilcoxon_rank_sum(&big, &big).unwrap().p_two_sided - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_sum_normal_matches_reference_formula() {
        // 30 v 30 with ties; reference computed directly from the textbook
        // normal approximation with tie and continuity corrections.
        let a: Vec<f64> = (0..30).map(|i| ((i * 7) % 13) as f64 * 0.5).collect();
        let b: Vec<f64> = (0..30).map(|i| ((i * 5) % 11) as f64 * 0.5 + 0.75).collect();
        let r = wilcoxon_rank_sum(&a, &b).unwrap();
        assert!(!r.exact);
        let mut pooled: Vec<(f64, usize)> = a.iter().map(|v| (*v, 0)).chain(b.iter().map(|v| (*v, 1))).collect();
        pooled.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        let mut w = 0.0;
        let mut tie_sum = 0.0;
        let mut i = 0;
        while i < pooled.len() {
            let mut j = i;
            while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
                j += 1;
            }
            let rank = (i + j + 2) as f64 / 2.0;
            w += rank * pooled[i..=j].iter().filter(|p| p.1 == 0).count() as f64;
            let t = (j - i + 1) as f64;
            tie_sum += t * t * t - t;
            i = j + 1;
        }
        let (n1, n2, n) = (30.0, 30.0, 60.0);
        let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_sum / (n * (n - 1.0)));
        let z = ((w - n1 * (n + 1.0) / 2.0).abs() - 0.5) / f64::sqrt(var);
        let p = statrs::function::erf::erfc(z / std::f64::consts::SQRT_2);
        assert!((r.p_two_sided - p).abs() < 1e-6, "{} vs {p}", r.p_two_sided);
    }

    #[test]
    fn signed_rank_all_positive() {
        let d = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
        let r = wilcoxon_signed_rank(&d, Alternative::Greater).unwrap();
        assert_eq!(r.win_fraction, 1.0);
        assert_eq!(r.rank_biserial, 1.0);
        assert!((r.p_value - 1.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn signed_rank_symmetric_pair() {
        let r = wilcoxon_signed_rank(&[1.0, -1.0], Alternative::TwoSided).unwrap();
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn signed_rank_drops_zeros_but_counts_them_in_win_fraction() {
        let r = wilcoxon_signed_rank(&[0.0, 1.0, 2.0, -0.5, 3.0, 0.0], Alternative::Greater).unwrap();
        assert_eq!(r.n_used, 4);
        assert!((r.win_fraction - 0.5).abs() < 1e-15);
        assert!(wilcoxon_signed_rank(&[0.0, 0.0], Alternative::Greater).is_err());
    }

    #[test]
    fn bootstrap_examples() {
        let (lo, hi) = bootstrap_ci_mean(&[2.5; 10], 1000, 0.95, 1).unwrap();
        assert_eq!((lo, hi), (2.5, 2.5));
        let v: Vec<f64> = (-15..=15).map(|i| i as f64).collect();
        let (lo, hi) = bootstrap_ci_mean(&v, 10_000, 0.95, 2).unwrap();
        let width = hi - lo;
        assert!(((hi - 0.0) - (0.0 - lo)).abs() < 0.05 * width, "[{lo}, {hi}]");
        assert_eq!(bootstrap_ci_mean(&v, 500, 0.9, 3).unwrap(), bootstrap_ci_mean(&v, 500, 0.9, 3).unwrap());
        assert!(bootstrap_ci_mean(&[1.0], 10, 0.95, 0).is_err());
    }

    #[test]
    fn elasticity_of_linear_and_constant_models() {
        let x = [2.0, 3.0, 5.0];
        let lin = FnPredictor(|r: &[f64]| 4.2 * r[1]);
        for eps in [0.01, 0.1, 0.5] {
            assert!((elasticity(&lin, &x, 1, eps).unwrap() - 1.0).abs() < 1e-12);
        }
        let flat = FnPredictor(|r: &[f64]| 7.0 + r[0]);
        assert_eq!(elasticity(&flat, &x, 2, 0.01).unwrap(), 0.0);
        let zero = FnPredictor(|_: &[f64]| 0.0);
        assert!(matches!(elasticity(&zero, &x, 0, 0.01), Err(Error::UndefinedElasticity)));
    }

    #[test]
    fn elasticity_matches_analytic_derivative() {
        // f = a/(b + c·x) + k: S = −c·x/(b + c·x)² · a / f(x)
        let (a, b, c, k) = (60.0, 10.0, 5.0, 1.5);
        let f = |r: &[f64]| a / (b + c * r[0]) + k;
        let x = [2.7];
        let fx = f(&x);
        let analytic = -c * x[0] * a / (b + c * x[0]).powi(2) / fx;
        for eps in [1e-2, 1e-3] {
            let s = elasticity(&FnPredictor(f), &x, 0, eps).unwrap();
            assert!((s - analytic).abs() < 2.0 * eps, "eps={eps}: {s} vs {analytic}");
        }
    }

    #[test]
    fn single_mechanism_gets_full_share() {
        let m = model(vec![("concrete_geometry", vec![Node::Var(data::FC)], vec![0.1], 0.5)], vec![2.0], 1.0);
        let x = vec![1.0; 9];
        let c = mechanism_contributions(&m, &x).unwrap();
        assert_eq!(c.shares[&Mechanism::Concrete], 100.0);
        assert!((c.contributions[&Mechanism::Concrete] - 2.0 * 0.6).abs() < 1e-12);
        assert_eq!(c.intercept, 1.0);
    }

    #[test]
    fn baseline_model_attributed_by_gene_ownership() {
        let genes = vec![
            Node::Var(data::FC),
            Node::mul(Node::Var(data::RHO), Node::Var(data::D_EFF)),
            Node::mul(Node::Var(data::VF), Node::Var(data::FC)),
            Node::Var(data::A_OVER_D),
        ];
        let m = model(vec![("all", genes, vec![1.0, 2.0, 3.0, 4.0], 0.25)], vec![0.5], 0.1);
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let c = mechanism_contributions(&m, &x).unwrap();
        assert!((c.contributions[&Mechanism::Concrete] - 0.5 * x[data::FC]).abs() < 1e-12);
        assert!((c.contributions[&Mechanism::Steel] - 0.5 * 2.0 * x[data::RHO] * x[data::D_EFF]).abs() < 1e-12);
        assert_eq!(c.contributions[&Mechanism::Fiber], 0.0);
        let mixed = 0.5 * (3.0 * x[data::VF] * x[data::FC] + 4.0 * x[data::A_OVER_D]);
        assert!((c.contributions[&Mechanism::Mixed] - mixed).abs() < 1e-9);
        assert!((c.intercept - (0.1 + 0.5 * 0.25)).abs() < 1e-15);
        let total: f64 = c.contributions.values().sum::<f64>() + c.intercept;
        assert!((total - c.prediction).abs() < 1e-9);
        assert!((c.shares.values().sum::<f64>() - 100.0).abs() < 1e-6);
    }

    #[test]
    fn parsimony_of_single_linear_term() {
        let m = model(vec![("p", vec![Node::Var(0)], vec![3.0], 0.0)], vec![1.0], 0.5);
        let p = parsimony(&m).unwrap();
        assert_eq!(p.n_terms, 2);
        assert_eq!((p.tree_size_nodes, p.operator_count), (5, 2));
    }

    #[test]
    fn closed_form_agrees_with_model() {
        let m = model(
            vec![
                ("concrete_geometry", vec![Node::div(Node::Var(data::FC), Node::Var(data::A_OVER_D)), Node::Var(data::D_EFF)], vec![0.3, 0.0], 0.7),
                ("steel_geometry", vec![Node::mul(Node::Var(data::RHO), Node::Const(2.0))], vec![-1.2], 0.1),
            ],
            vec![0.9, 1.1],
            -0.4,
        );
        let (tree, terms) = closed_form(&m).unwrap();
        assert_eq!(terms, 3);
        let x: Vec<f64> = (1..=9).map(|v| v as f64 * 1.3).collect();
        let a = tree.evaluate(&x, &NoAbstractions).unwrap();
        let b = m.predict_row(&x).unwrap();
        assert!((a - b).abs() < 1e-12);
        let p = parsimony(&m).unwrap();
        let metrics = tree.metrics();
        assert_eq!((p.tree_size_nodes, p.operator_count), (metrics.node_count, metrics.operator_count));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn rank_sum_exact_matches_enumeration(
            a in proptest::collection::vec(0u8..6, 1..7),
            b in proptest::collection::vec(0u8..6, 1..7),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let r = wilcoxon_rank_sum_with(&a, &b, PMethod::Exact).unwrap();
            prop_assert!((r.p_two_sided - rank_sum_enumeration(&a, &b)).abs() < 1e-6);
        }

        #[test]
        fn signed_rank_exact_matches_enumeration(d in proptest::collection::vec(-5i8..=5, 1..=12)) {
            let d: Vec<f64> = d.into_iter().map(|v| f64::from(v) * 0.5).collect();
            prop_assume!(d.iter().any(|x| *x != 0.0));
            for alt in [Alternative::Greater, Alternative::TwoSided] {
                let r = wilcoxon_signed_rank_with(&d, alt, PMethod::Exact).unwrap();
                prop_assert!((r.p_value - signed_rank_enumeration(&d, alt)).abs() < 1e-6);
                prop_assert!(r.rank_biserial.abs() <= 1.0 && (0.0..=1.0).contains(&r.win_fraction));
            }
        }

        #[test]
        fn normal_approximation_close_to_exact(d in proptest::collection::vec(-100.0f64..100.0, 5..=12)) {
            prop_assume!(d.iter().all(|x| *x != 0.0));
            // Two-sided tails double the discreteness error below n = 7.
            let alts: &[Alternative] = if d.len() >= 7 {
                &[Alternative::Greater, Alternative::TwoSided]
            } else {
                &[Alternative::Greater]
            };
            for &alt in alts {
                let e = wilcoxon_signed_rank_with(&d, alt, PMethod::Exact).unwrap().p_value;
                let a = wilcoxon_signed_rank_with(&d, alt, PMethod::Normal).unwrap().p_value;
                prop_assert!((e - a).abs() <= 0.03, "exact {} approx {}", e, a);
            }
        }
    }
}
