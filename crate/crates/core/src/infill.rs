//! Infill criteria: which surrogate-scored candidate receives the next true evaluation.
//!
//! The five criteria are reconstructions from their stated roles (angle-based
//! diversity, PBI improvement with convergence or diversity emphasis, and
//! expected front-distance improvement with exploration or exploitation
//! emphasis). Each lives behind [`CriterionId`] so formulas can be swapped.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pareto::{self, ReferenceDirectionSet};
use crate::population::{SurrogatePopulation, TruePopulation};
use crate::surrogate::{normal_cdf, normal_pdf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CriterionId {
    NdA,
    NdDpbiConv,
    NdDpbiDiv,
    EpdiExplore,
    EpdiExploit,
}

impl CriterionId {
    pub const ALL: [CriterionId; 5] = [
        CriterionId::NdA,
        CriterionId::NdDpbiConv,
        CriterionId::NdDpbiDiv,
        CriterionId::EpdiExplore,
        CriterionId::EpdiExploit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CriterionId::NdA => "nd_a",
            CriterionId::NdDpbiConv => "nd_dpbi_conv",
            CriterionId::NdDpbiDiv => "nd_dpbi_div",
            CriterionId::EpdiExplore => "epdi_explore",
            CriterionId::EpdiExploit => "epdi_exploit",
        }
    }
}

impl fmt::Display for CriterionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CriterionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        CriterionId::ALL
            .into_iter()
            .find(|c| c.name() == lower)
            .ok_or_else(|| Error::config(s, "unknown infill criterion"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfillConfig {
    pub theta_conv: f64,
    pub theta_div: f64,
    pub explore_sigma: f64,
    pub exploit_sigma: f64,
}

impl Default for InfillConfig {
    fn default() -> Self {
        Self {
            theta_conv: 1.0,
            theta_div: 10.0,
            explore_sigma: 2.0,
            exploit_sigma: 0.5,
        }
    }
}

/// Chosen candidates; `fell_back` is set when the criterion's restricted pool
/// was empty and the whole candidate set was ranked instead.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Elite {
    pub indices: Vec<usize>,
    pub fell_back: bool,
}

/// Picks `k` distinct candidates of `p_sur` for true evaluation.
pub fn select_elite(
    criterion: CriterionId,
    config: &InfillConfig,
    p_sur: &SurrogatePopulation,
    p_true: &TruePopulation,
    dirs: &ReferenceDirectionSet,
    k: usize,
) -> Result<Elite> {
    if k == 0 || k > p_sur.len() {
        return Err(Error::contract(format!(
            "need 1 <= k <= {} candidates, got k = {k}",
            p_sur.len()
        )));
    }
    if p_true.is_empty() {
        return Err(Error::EmptyPopulation("infill needs a non-empty archive"));
    }
    let (pool, scores) = match criterion {
        CriterionId::NdA => {
            let norm = Normalizer::new(p_true, p_sur);
            (pareto::non_dominated(&p_sur.mean), nd_angle_scores(&norm, p_sur, p_true))
        }
        CriterionId::NdDpbiConv => {
            let norm = Normalizer::new(p_true, p_sur);
            let (scores, _) = dpbi_scores(&norm, p_sur, p_true, dirs, config.theta_conv)?;
            (pareto::non_dominated(&p_sur.mean), scores)
        }
        CriterionId::NdDpbiDiv => {
            let norm = Normalizer::new(p_true, p_sur);
            let (scores, assoc) = dpbi_scores(&norm, p_sur, p_true, dirs, config.theta_div)?;
            let nd = pareto::non_dominated(&p_sur.mean);
            let coverage = direction_coverage(&norm, p_true, dirs)?;
            let least = nd.iter().map(|&i| coverage[assoc[i]]).min();
            let pool = nd
                .into_iter()
                .filter(|&i| Some(coverage[assoc[i]]) == least)
                .collect();
            (pool, scores)
        }
        CriterionId::EpdiExplore => (
            (0..p_sur.len()).collect(),
            epdi_scores(p_sur, p_true, config.explore_sigma)?,
        ),
        CriterionId::EpdiExploit => (
            (0..p_sur.len()).collect(),
            epdi_scores(p_sur, p_true, config.exploit_sigma)?,
        ),
    };
    let fell_back = pool.is_empty();
    let mut in_pool = vec![fell_back; p_sur.len()];
    for &i in &pool {
        in_pool[i] = true;
    }
    // pool members first, then by descending score, then by index
    let mut order: Vec<usize> = (0..p_sur.len()).collect();
    order.sort_by(|&a, &b| {
        in_pool[b]
            .cmp(&in_pool[a])
            .then(scores[b].total_cmp(&scores[a]))
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(Elite {
        indices: order,
        fell_back,
    })
}

/// Min-max scaling over the archive and the candidates' predicted means.
struct Normalizer {
    ideal: Vec<f64>,
    scale: Vec<f64>,
}

impl Normalizer {
    fn new(p_true: &TruePopulation, p_sur: &SurrogatePopulation) -> Self {
        let m = p_true.y[0].len();
        let all = || p_true.y.iter().chain(&p_sur.mean);
        let ideal: Vec<f64> = (0..m)
            .map(|j| all().map(|p| p[j]).fold(f64::INFINITY, f64::min))
            .collect();
        let scale = (0..m)
            .map(|j| {
                let hi = all().map(|p| p[j]).fold(f64::NEG_INFINITY, f64::max);
                let r = hi - ideal[j];
                if r > 1e-12 {
                    r
                } else {
                    1.0
                }
            })
            .collect();
        Self { ideal, scale }
    }

    fn apply(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(&self.ideal)
            .zip(&self.scale)
            .map(|((v, lo), s)| (v - lo) / s)
            .collect()
    }
}

fn angle(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        // a vector at the ideal point carries no direction
        return 0.0;
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    c.clamp(-1.0, 1.0).acos()
}

/// Smallest angle between each candidate and any archive member, seen from the ideal point.
fn nd_angle_scores(norm: &Normalizer, p_sur: &SurrogatePopulation, p_true: &TruePopulation) -> Vec<f64> {
    let archive: Vec<Vec<f64>> = p_true.y.iter().map(|y| norm.apply(y)).collect();
    p_sur
        .mean
        .iter()
        .map(|c| {
            let c = norm.apply(c);
            archive
                .iter()
                .map(|t| angle(&c, t))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Index of the direction with the smallest perpendicular distance to `f` (ties: lowest index).
fn associate(f: &[f64], dirs: &ReferenceDirectionSet) -> Result<usize> {
    let origin = vec![0.0; f.len()];
    let mut best = (0, f64::INFINITY);
    for (j, w) in dirs.dirs.iter().enumerate() {
        let d = pareto::perpendicular_distance(f, w, &origin)?;
        if d < best.1 {
            best = (j, d);
        }
    }
    Ok(best.0)
}

/// Improvement of each candidate's PBI over the archive's best PBI along the
/// candidate's associated direction. Also returns the associations.
fn dpbi_scores(
    norm: &Normalizer,
    p_sur: &SurrogatePopulation,
    p_true: &TruePopulation,
    dirs: &ReferenceDirectionSet,
    theta: f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let archive: Vec<Vec<f64>> = p_true.y.iter().map(|y| norm.apply(y)).collect();
    let origin = vec![0.0; norm.ideal.len()];
    let mut best = Vec::with_capacity(dirs.len());
    for w in &dirs.dirs {
        let mut b = f64::INFINITY;
        for t in &archive {
            b = b.min(pareto::pbi(t, w, theta, &origin)?);
        }
        best.push(b);
    }
    let mut scores = Vec::with_capacity(p_sur.len());
    let mut assoc = Vec::with_capacity(p_sur.len());
    for c in &p_sur.mean {
        let c = norm.apply(c);
        let j = associate(&c, dirs)?;
        scores.push(best[j] - pareto::pbi(&c, &dirs.dirs[j], theta, &origin)?);
        assoc.push(j);
    }
    Ok((scores, assoc))
}

/// Number of non-dominated archive members associated with each direction.
fn direction_coverage(
    norm: &Normalizer,
    p_true: &TruePopulation,
    dirs: &ReferenceDirectionSet,
) -> Result<Vec<usize>> {
    let mut count = vec![0; dirs.len()];
    for y in p_true.front() {
        count[associate(&norm.apply(&y), dirs)?] += 1;
    }
    Ok(count)
}

/// Gaussian expected improvement of a minimized quantity with mean `mu` and
/// spread `sigma` below `best`.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    let gain = best - mu;
    if sigma <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    gain * normal_cdf(z) + sigma * normal_pdf(z)
}

/// L1 distance from `y` to the closest front point, negative when `y` dominates that point.
pub fn signed_front_distance(y: &[f64], front: &[Vec<f64>]) -> Result<f64> {
    let fd = pareto::manhattan_front_distance(y, front)?;
    Ok(if pareto::dominates(y, &front[fd.index]) {
        -fd.d_i
    } else {
        fd.d_i
    })
}

fn epdi_scores(p_sur: &SurrogatePopulation, p_true: &TruePopulation, sigma_mult: f64) -> Result<Vec<f64>> {
    let front = p_true.front();
    p_sur
        .mean
        .iter()
        .zip(&p_sur.std)
        .map(|(mu, sd)| {
            let dist = signed_front_distance(mu, &front)?;
            let sigma = sigma_mult * sd.iter().map(|s| s.abs()).sum::<f64>();
            Ok(expected_improvement(dist, sigma, 0.0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pareto::das_dennis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sur(points: &[([f64; 2], [f64; 2])]) -> SurrogatePopulation {
        let mut p = SurrogatePopulation::default();
        for (i, (m, s)) in points.iter().enumerate() {
            p.push(vec![i as f64], m.to_vec(), s.to_vec());
        }
        p
    }

    fn archive(points: &[[f64; 2]]) -> TruePopulation {
        TruePopulation::new(
            points.iter().map(|_| vec![0.0]).collect(),
            points.iter().map(|p| p.to_vec()).collect(),
        )
        .unwrap()
    }

    fn pick(c: CriterionId, s: &SurrogatePopulation, t: &TruePopulation) -> usize {
        select_elite(c, &InfillConfig::default(), s, t, &das_dennis(2, 19), 1)
            .unwrap()
            .indices[0]
    }

    /// Closed-form expected improvement written out independently of the module.
    fn ei_oracle(mu: f64, sigma: f64) -> f64 {
        let z = -mu / sigma;
        let cdf = 0.5 * (1.0 + statrs::function::erf::erf(z / 2f64.sqrt()));
        let pdf = (-z * z / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        -mu * cdf + sigma * pdf
    }

    #[test]
    fn single_candidate_always_chosen() {
        let s = sur(&[([0.4, 0.4], [0.1, 0.1])]);
        let t = archive(&[[0.0, 1.0], [1.0, 0.0]]);
        for c in CriterionId::ALL {
            assert_eq!(pick(c, &s, &t), 0);
        }
    }

    #[test]
    fn dpbi_conv_zero_score_loses_to_improvement() {
        // one archive point on the diagonal; normalization fixed by the corner points
        let t = archive(&[[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]]);
        let s = sur(&[([0.5, 0.5], [0.0, 0.0]), ([0.4, 0.4], [0.0, 0.0])]);
        let norm = Normalizer::new(&t, &s);
        let dirs = das_dennis(2, 2);
        let (scores, assoc) = dpbi_scores(&norm, &s, &t, &dirs, 1.0).unwrap();
        assert_eq!(assoc, vec![1, 1]);
        assert!(scores[0].abs() < 1e-12);
        assert!(scores[1] > 0.0);
        let e = select_elite(CriterionId::NdDpbiConv, &InfillConfig::default(), &s, &t, &dirs, 1).unwrap();
        assert_eq!(e.indices, vec![1]);
    }

    #[test]
    fn dominated_certain_candidates_rank_last_under_epdi() {
        let t = archive(&[[0.0, 1.0], [1.0, 0.0]]);
        let s = sur(&[([2.0, 2.0], [0.0, 0.0]), ([0.6, 0.6], [0.2, 0.2])]);
        for c in [CriterionId::EpdiExplore, CriterionId::EpdiExploit] {
            let scores = epdi_scores(&s, &t, 1.0).unwrap();
            assert_eq!(scores[0], 0.0);
            assert_eq!(pick(c, &s, &t), 1);
        }
    }

    #[test]
    fn explore_and_exploit_disagree_as_expected() {
        let t = archive(&[[1.0, 1.0]]);
        // low mean: dominates the front point by 0.1 in L1, aggregated std 0.05
        // mid mean: 0.2 away and not dominating, aggregated std 0.5
        let s = sur(&[([0.95, 0.95], [0.025, 0.025]), ([1.1, 1.1], [0.25, 0.25])]);
        let explore = [ei_oracle(-0.1, 0.1), ei_oracle(0.2, 1.0)];
        let exploit = [ei_oracle(-0.1, 0.025), ei_oracle(0.2, 0.25)];
        let got_explore = epdi_scores(&s, &t, 2.0).unwrap();
        let got_exploit = epdi_scores(&s, &t, 0.5).unwrap();
        for (a, b) in got_explore.iter().zip(explore).chain(got_exploit.iter().zip(exploit)) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!(explore[1] > explore[0] && exploit[0] > exploit[1]);
        assert_eq!(pick(CriterionId::EpdiExplore, &s, &t), 1);
        assert_eq!(pick(CriterionId::EpdiExploit, &s, &t), 0);
    }

    #[test]
    fn nd_a_prefers_new_directions() {
        let t = archive(&[[0.0, 1.0], [0.1, 0.9], [0.2, 0.85]]);
        let s = sur(&[([0.15, 0.88], [0.0; 2]), ([0.9, 0.1], [0.0; 2])]);
        assert_eq!(pick(CriterionId::NdA, &s, &t), 1);
    }

    #[test]
    fn nd_dpbi_div_targets_uncovered_directions() {
        let t = archive(&[[0.0, 1.0], [0.05, 0.9], [0.1, 0.8], [1.0, 0.0]]);
        // candidate 0 improves PBI more but sits in the crowded region
        let s = sur(&[([0.02, 0.7], [0.0; 2]), ([0.5, 0.55], [0.0; 2])]);
        assert_eq!(pick(CriterionId::NdDpbiDiv, &s, &t), 1);
    }

    #[test]
    fn k_contract() {
        let s = sur(&[([0.4, 0.4], [0.1, 0.1])]);
        let t = archive(&[[0.0, 1.0]]);
        let dirs = das_dennis(2, 3);
        assert!(select_elite(CriterionId::NdA, &InfillConfig::default(), &s, &t, &dirs, 2).is_err());
        assert!(select_elite(CriterionId::NdA, &InfillConfig::default(), &s, &t, &dirs, 0).is_err());
    }

    fn random_case(rng: &mut ChaCha8Rng, n: usize) -> (SurrogatePopulation, TruePopulation) {
        let mut s = SurrogatePopulation::default();
        for i in 0..n {
            let a: f64 = rng.random();
            s.push(
                vec![i as f64],
                vec![a, 1.0 - a + rng.random::<f64>() * 0.5],
                vec![rng.random::<f64>() * 0.1, rng.random::<f64>() * 0.1],
            );
        }
        let mut t = TruePopulation::default();
        for _ in 0..15 {
            let a: f64 = rng.random();
            t.push(vec![0.0], vec![a, 1.2 - a + rng.random::<f64>() * 0.5]);
        }
        (s, t)
    }

    #[test]
    fn selection_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dirs = das_dennis(2, 19);
        for _ in 0..30 {
            let (s, t) = random_case(&mut rng, 20);
            let mut perm: Vec<usize> = (0..20).collect();
            for i in (1..20).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let shuffled = s.subset(&perm);
            for c in CriterionId::ALL {
                let e = select_elite(c, &InfillConfig::default(), &s, &t, &dirs, 3).unwrap();
                let mut idx = e.indices.clone();
                idx.sort();
                idx.dedup();
                assert_eq!(idx.len(), 3);
                assert!(idx.iter().all(|&i| i < 20));
                let e2 = select_elite(c, &InfillConfig::default(), &shuffled, &t, &dirs, 1).unwrap();
                assert_eq!(shuffled.x[e2.indices[0]], s.x[e.indices[0]], "{c}");
            }
        }
    }

    #[test]
    fn nd_a_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dirs = das_dennis(2, 19);
        for _ in 0..20 {
            let (s, t) = random_case(&mut rng, 12);
            let f = 0.1 + rng.random::<f64>() * 10.0;
            let mut s2 = s.clone();
            s2.mean.iter_mut().flatten().for_each(|v| *v *= f);
            let mut t2 = t.clone();
            t2.y.iter_mut().flatten().for_each(|v| *v *= f);
            let norm = Normalizer::new(&t, &s);
            let norm2 = Normalizer::new(&t2, &s2);
            let a = nd_angle_scores(&norm, &s, &t);
            let b = nd_angle_scores(&norm2, &s2, &t2);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9);
            }
            assert_eq!(
                select_elite(CriterionId::NdA, &InfillConfig::default(), &s, &t, &dirs, 1).unwrap(),
                select_elite(CriterionId::NdA, &InfillConfig::default(), &s2, &t2, &dirs, 1).unwrap()
            );
        }
    }

    #[test]
    fn criterion_names_round_trip() {
        for c in CriterionId::ALL {
            assert_eq!(c.name().parse::<CriterionId>().unwrap(), c);
        }
        assert!("nd_b".parse::<CriterionId>().is_err());
    }
}
