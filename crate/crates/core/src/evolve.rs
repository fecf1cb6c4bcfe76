//! NSGA-III candidate generation in the surrogate space.
//!
//! [`EvolveState`] keeps a parent population across steps. Offspring are bred
//! from it with tournament selection, SBX and polynomial mutation, then
//! scored by the surrogate. Survival uses reference-direction niching.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pareto::{self, das_dennis, ReferenceDirectionSet};
use crate::population::{SurrogatePopulation, TruePopulation};
use crate::surrogate::SurrogateModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolveConfig {
    /// Offspring per generation.
    pub pop_size: usize,
    pub sbx_eta: f64,
    pub sbx_prob: f64,
    pub pm_eta: f64,
    /// Per-variable mutation probability; `None` means `1 / d`.
    pub pm_prob: Option<f64>,
    /// Das–Dennis divisions; `None` picks the smallest giving at least 20 directions.
    pub divisions: Option<usize>,
    /// Name of the offspring generator.
    pub generator: String,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            pop_size: 50,
            sbx_eta: 15.0,
            sbx_prob: 0.9,
            pm_eta: 20.0,
            pm_prob: None,
            divisions: None,
            generator: NsgaVariation::NAME.to_string(),
        }
    }
}

impl EvolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pop_size < 2 {
            return Err(Error::config("evolve.pop_size", "must be at least 2"));
        }
        for (key, p) in [("evolve.sbx_prob", Some(self.sbx_prob)), ("evolve.pm_prob", self.pm_prob)] {
            if let Some(p) = p {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::config(key, "probability must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn directions(&self, m: usize) -> ReferenceDirectionSet {
        let h = self
            .divisions
            .unwrap_or_else(|| ReferenceDirectionSet::divisions_for(m, 20));
        das_dennis(m, h)
    }
}

/// Produces decision vectors from a scored parent population.
pub trait Generator: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &str;

    fn offspring(
        &self,
        parents: &SurrogatePopulation,
        count: usize,
        lower: &[f64],
        upper: &[f64],
        rng: &mut dyn RngCore,
    ) -> Vec<Vec<f64>>;
}

/// Binary tournament on (rank, crowding), SBX crossover and polynomial mutation.
#[derive(Clone, Debug)]
pub struct NsgaVariation {
    pub sbx_eta: f64,
    pub sbx_prob: f64,
    pub pm_eta: f64,
    pub pm_prob: Option<f64>,
}

impl NsgaVariation {
    pub const NAME: &'static str = "nsga3";

    pub fn from_config(c: &EvolveConfig) -> Self {
        Self {
            sbx_eta: c.sbx_eta,
            sbx_prob: c.sbx_prob,
            pm_eta: c.pm_eta,
            pm_prob: c.pm_prob,
        }
    }
}

pub fn generator_by_name(config: &EvolveConfig) -> Result<Arc<dyn Generator>> {
    match config.generator.as_str() {
        NsgaVariation::NAME => Ok(Arc::new(NsgaVariation::from_config(config))),
        other => Err(Error::config(other, "unknown generator")),
    }
}

impl Generator for NsgaVariation {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn offspring(
        &self,
        parents: &SurrogatePopulation,
        count: usize,
        lower: &[f64],
        upper: &[f64],
        rng: &mut dyn RngCore,
    ) -> Vec<Vec<f64>> {
        let rank = pareto::ranks(&parents.mean);
        let mut crowd = vec![0.0; parents.len()];
        for front in pareto::nds(&parents.mean) {
            for (i, c) in front.iter().zip(pareto::crowding_distance(&parents.mean, &front)) {
                crowd[*i] = c;
            }
        }
        let tournament = |rng: &mut dyn RngCore| {
            let a = rng.random_range(0..parents.len());
            let b = rng.random_range(0..parents.len());
            let better = (rank[a], -crowd[a]).partial_cmp(&(rank[b], -crowd[b]));
            match better {
                Some(std::cmp::Ordering::Greater) => b,
                _ => a,
            }
        };
        let d = lower.len();
        let pm_prob = self.pm_prob.unwrap_or(1.0 / d as f64);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let p1 = parents.x[tournament(rng)].clone();
            let p2 = parents.x[tournament(rng)].clone();
            let (mut c1, mut c2) = if rng.random::<f64>() < self.sbx_prob {
                sbx(&p1, &p2, self.sbx_eta, lower, upper, rng)
            } else {
                (p1, p2)
            };
            for c in [&mut c1, &mut c2] {
                polynomial_mutation(c, self.pm_eta, pm_prob, lower, upper, rng);
                for ((v, &lo), &hi) in c.iter_mut().zip(lower).zip(upper) {
                    *v = v.clamp(lo, hi);
                }
            }
            out.push(c1);
            if out.len() < count {
                out.push(c2);
            }
        }
        out
    }
}

/// Simulated binary crossover (bounded form); each variable crosses with probability 0.5.
pub fn sbx<R: Rng + ?Sized>(
    p1: &[f64],
    p2: &[f64],
    eta: f64,
    lower: &[f64],
    upper: &[f64],
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let mut c1 = p1.to_vec();
    let mut c2 = p2.to_vec();
    for i in 0..p1.len() {
        if rng.random::<f64>() > 0.5 || (p1[i] - p2[i]).abs() < 1e-14 {
            continue;
        }
        let (y1, y2) = if p1[i] < p2[i] { (p1[i], p2[i]) } else { (p2[i], p1[i]) };
        let (lo, hi) = (lower[i], upper[i]);
        let u = rng.random::<f64>();
        let spread = |beta: f64| {
            let alpha = 2.0 - beta.powf(-(eta + 1.0));
            if u <= 1.0 / alpha {
                (u * alpha).powf(1.0 / (eta + 1.0))
            } else {
                (1.0 / (2.0 - u * alpha)).powf(1.0 / (eta + 1.0))
            }
        };
        let beta_lo = 1.0 + 2.0 * (y1 - lo) / (y2 - y1);
        let beta_hi = 1.0 + 2.0 * (hi - y2) / (y2 - y1);
        let a = 0.5 * ((y1 + y2) - spread(beta_lo) * (y2 - y1));
        let b = 0.5 * ((y1 + y2) + spread(beta_hi) * (y2 - y1));
        let (a, b) = (a.clamp(lo, hi), b.clamp(lo, hi));
        // keep each child on the side of the parent it came from
        if p1[i] < p2[i] {
            c1[i] = a;
            c2[i] = b;
        } else {
            c1[i] = b;
            c2[i] = a;
        }
    }
    (c1, c2)
}

/// Bounded polynomial mutation.
pub fn polynomial_mutation<R: Rng + ?Sized>(
    x: &mut [f64],
    eta: f64,
    prob: f64,
    lower: &[f64],
    upper: &[f64],
    rng: &mut R,
) {
    for i in 0..x.len() {
        if rng.random::<f64>() >= prob {
            continue;
        }
        let (lo, hi) = (lower[i], upper[i]);
        let span = hi - lo;
        if span <= 0.0 {
            continue;
        }
        let d1 = (x[i] - lo) / span;
        let d2 = (hi - x[i]) / span;
        let u = rng.random::<f64>();
        let p = 1.0 / (eta + 1.0);
        let dq = if u < 0.5 {
            let v = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1).powf(eta + 1.0);
            v.powf(p) - 1.0
        } else {
            let v = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2).powf(eta + 1.0);
            1.0 - v.powf(p)
        };
        x[i] = (x[i] + dq * span).clamp(lo, hi);
    }
}

/// NSGA-III survival of `k` members of `pool`. Returns distinct pool indices.
pub fn environmental_select<R: Rng + ?Sized>(
    pool: &SurrogatePopulation,
    k: usize,
    dirs: &ReferenceDirectionSet,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if k > pool.len() {
        return Err(Error::contract(format!(
            "cannot select {k} survivors from a pool of {}",
            pool.len()
        )));
    }
    let fronts = pareto::nds(&pool.mean);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut last: Vec<usize> = Vec::new();
    for front in fronts {
        if chosen.len() + front.len() <= k {
            chosen.extend(front);
            if chosen.len() == k {
                return Ok(chosen);
            }
        } else {
            last = front;
            break;
        }
    }
    if last.is_empty() {
        return Ok(chosen);
    }

    let considered: Vec<usize> = chosen.iter().chain(&last).copied().collect();
    let normed = normalize(&considered.iter().map(|&i| pool.mean[i].clone()).collect::<Vec<_>>());
    let mut niche = vec![0usize; dirs.len()];
    let mut assoc = Vec::with_capacity(considered.len());
    for f in &normed {
        let (mut best, mut dist) = (0, f64::INFINITY);
        for (j, w) in dirs.dirs.iter().enumerate() {
            let dj = pareto::perpendicular_distance(f, w, &vec![0.0; f.len()])?;
            if dj < dist {
                best = j;
                dist = dj;
            }
        }
        assoc.push((best, dist));
    }
    for a in assoc.iter().take(chosen.len()) {
        niche[a.0] += 1;
    }

    // candidates of the last front, grouped by their direction
    let offset = chosen.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); dirs.len()];
    for (pos, _) in last.iter().enumerate() {
        members[assoc[offset + pos].0].push(pos);
    }
    let mut open: Vec<usize> = (0..dirs.len()).filter(|&j| !members[j].is_empty()).collect();
    while chosen.len() < k {
        let min = open.iter().map(|&j| niche[j]).min().expect("open niche remains");
        let ties: Vec<usize> = open.iter().copied().filter(|&j| niche[j] == min).collect();
        let j = ties[rng.random_range(0..ties.len())];
        let list = &mut members[j];
        let pick = if niche[j] == 0 {
            let (slot, _) = list
                .iter()
                .enumerate()
                .min_by(|a, b| assoc[offset + *a.1].1.total_cmp(&assoc[offset + *b.1].1))
                .expect("non-empty niche");
            slot
        } else {
            rng.random_range(0..list.len())
        };
        let pos = list.remove(pick);
        chosen.push(last[pos]);
        niche[j] += 1;
        if list.is_empty() {
            open.retain(|&o| o != j);
        }
    }
    Ok(chosen)
}

/// Translates by the ideal point and scales by hyperplane intercepts through
/// the extreme points, falling back to the per-objective maxima.
fn normalize(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = points[0].len();
    let ideal: Vec<f64> = (0..m)
        .map(|j| points.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min))
        .collect();
    let shifted: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&ideal).map(|(a, b)| a - b).collect())
        .collect();
    let worst: Vec<f64> = (0..m)
        .map(|j| shifted.iter().map(|p| p[j]).fold(0.0, f64::max))
        .collect();

    let extremes: Vec<&Vec<f64>> = (0..m)
        .map(|axis| {
            shifted
                .iter()
                .min_by(|a, b| asf(a, axis).total_cmp(&asf(b, axis)))
                .expect("non-empty")
        })
        .collect();
    let mat = DMatrix::from_fn(m, m, |r, c| extremes[r][c]);
    let intercepts: Option<Vec<f64>> = mat
        .lu()
        .solve(&DVector::from_element(m, 1.0))
        .map(|plane| plane.iter().map(|&a| 1.0 / a).collect::<Vec<f64>>())
        .filter(|ic: &Vec<f64>| {
            ic.iter()
                .zip(&worst)
                .all(|(&v, &w)| v.is_finite() && v > 1e-10 && v <= w * (1.0 + 1e-9) + 1e-12)
        });
    let scale: Vec<f64> = intercepts
        .unwrap_or(worst)
        .into_iter()
        .map(|s| if s > 1e-12 { s } else { 1.0 })
        .collect();
    shifted
        .into_iter()
        .map(|p| p.iter().zip(&scale).map(|(a, s)| a / s).collect())
        .collect()
}

/// Achievement scalarization toward one axis.
fn asf(p: &[f64], axis: usize) -> f64 {
    p.iter()
        .enumerate()
        .map(|(j, &v)| if j == axis { v } else { v * 1e6 })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Generation state of the surrogate-space optimizer for one episode.
#[derive(Clone, Debug)]
pub struct EvolveState {
    pub config: EvolveConfig,
    pub dirs: ReferenceDirectionSet,
    generator: Arc<dyn Generator>,
    parents: SurrogatePopulation,
    current: SurrogatePopulation,
    lower: Vec<f64>,
    upper: Vec<f64>,
    rng: ChaCha8Rng,
}

impl EvolveState {
    /// Seeds the parents with the best of the archive, then breeds the first offspring.
    pub fn init(
        config: &EvolveConfig,
        archive: &TruePopulation,
        model: &SurrogateModel,
        lower: &[f64],
        upper: &[f64],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if archive.is_empty() {
            return Err(Error::EmptyPopulation("evolve needs a non-empty archive"));
        }
        let m = archive.y[0].len();
        let mut state = Self {
            config: config.clone(),
            dirs: config.directions(m),
            generator: generator_by_name(config)?,
            parents: SurrogatePopulation::default(),
            current: SurrogatePopulation::default(),
            lower: lower.to_vec(),
            upper: upper.to_vec(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let pool = as_scored(archive, 0..archive.len());
        state.parents = state.survivors(&pool)?;
        state.current = state.propose(model);
        Ok(state)
    }

    /// The current surrogate-scored candidates.
    pub fn current(&self) -> &SurrogatePopulation {
        &self.current
    }

    pub fn parents(&self) -> &SurrogatePopulation {
        &self.parents
    }

    /// Breeds `pop_size` offspring from the parents and scores them with `model`.
    pub fn propose(&mut self, model: &SurrogateModel) -> SurrogatePopulation {
        let xs = self.generator.offspring(
            &self.parents,
            self.config.pop_size,
            &self.lower,
            &self.upper,
            &mut self.rng,
        );
        model.predict_batch(&xs)
    }

    fn survivors(&mut self, pool: &SurrogatePopulation) -> Result<SurrogatePopulation> {
        let k = self.config.pop_size.min(pool.len());
        let idx = environmental_select(pool, k, &self.dirs, &mut self.rng)?;
        Ok(pool.subset(&idx))
    }

    /// Advances one generation without spending true evaluations.
    pub fn resample(&mut self, model: &SurrogateModel) -> Result<&SurrogatePopulation> {
        let mut pool = self.parents.clone();
        pool.extend(&self.current);
        self.parents = self.survivors(&pool)?;
        self.current = self.propose(model);
        Ok(&self.current)
    }

    /// Advances one generation after a true evaluation: parents and the last
    /// offspring are re-scored under the refitted model, the newly evaluated
    /// archive entries `new` join as immigrants, and fresh offspring are bred.
    pub fn after_true_evaluation(
        &mut self,
        archive: &TruePopulation,
        new: std::ops::Range<usize>,
        model: &SurrogateModel,
    ) -> Result<&SurrogatePopulation> {
        let mut xs = self.parents.x.clone();
        xs.extend(self.current.x.iter().cloned());
        let mut pool = model.predict_batch(&xs);
        pool.extend(&as_scored(archive, new));
        self.parents = self.survivors(&pool)?;
        self.current = self.propose(model);
        Ok(&self.current)
    }
}

/// Archive entries viewed as exactly known candidates (zero spread).
fn as_scored(archive: &TruePopulation, range: std::ops::Range<usize>) -> SurrogatePopulation {
    let mut pop = SurrogatePopulation::default();
    for i in range {
        let m = archive.y[i].len();
        pop.push(archive.x[i].clone(), archive.y[i].clone(), vec![0.0; m]);
    }
    pop
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{lhs_init, ProblemKind, ProblemSpec};
    use crate::surrogate::SurrogateConfig;

    fn setup(d: usize) -> (ProblemSpec, TruePopulation, SurrogateModel) {
        let spec = ProblemSpec::new(ProblemKind::Zdt1, d, 2).unwrap();
        let x = lhs_init(&spec, 20, 3);
        let y = x.iter().map(|r| spec.evaluate(r).unwrap()).collect();
        let pop = TruePopulation::new(x, y).unwrap();
        let model =
            SurrogateModel::fit_population(&SurrogateConfig::default(), &pop, &spec.lower, &spec.upper, 1).unwrap();
        (spec, pop, model)
    }

    fn scored(points: &[[f64; 2]]) -> SurrogatePopulation {
        let mut p = SurrogatePopulation::default();
        for (i, q) in points.iter().enumerate() {
            p.push(vec![i as f64], q.to_vec(), vec![0.0, 0.0]);
        }
        p
    }

    #[test]
    fn propose_respects_bounds_and_size() {
        let (spec, pop, model) = setup(15);
        let state = EvolveState::init(&EvolveConfig::default(), &pop, &model, &spec.lower, &spec.upper, 4).unwrap();
        let cur = state.current();
        assert_eq!(cur.len(), 50);
        assert!(cur.x.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_operators_copy_parents() {
        let (spec, pop, model) = setup(6);
        let cfg = EvolveConfig {
            sbx_prob: 0.0,
            pm_prob: Some(0.0),
            ..EvolveConfig::default()
        };
        let state = EvolveState::init(&cfg, &pop, &model, &spec.lower, &spec.upper, 4).unwrap();
        for x in &state.current().x {
            assert!(state.parents().x.contains(x));
        }
    }

    #[test]
    fn seeded_runs_repeat() {
        let (spec, pop, model) = setup(6);
        let run = || {
            let mut s = EvolveState::init(&EvolveConfig::default(), &pop, &model, &spec.lower, &spec.upper, 8).unwrap();
            s.resample(&model).unwrap().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resample_advances_and_keeps_size() {
        let (spec, pop, model) = setup(6);
        let mut s = EvolveState::init(&EvolveConfig::default(), &pop, &model, &spec.lower, &spec.upper, 8).unwrap();
        let before = s.current().clone();
        let after = s.resample(&model).unwrap().clone();
        assert_eq!(after.len(), 50);
        assert_ne!(before.x, after.x);
    }

    #[test]
    fn sbx_with_huge_eta_copies_parents() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lo = vec![0.0; 8];
        let hi = vec![1.0; 8];
        for _ in 0..100 {
            let p1: Vec<f64> = (0..8).map(|_| rng.random()).collect();
            let p2: Vec<f64> = (0..8).map(|_| rng.random()).collect();
            let (c1, c2) = sbx(&p1, &p2, 1e6, &lo, &hi, &mut rng);
            for i in 0..8 {
                assert!((c1[i] - p1[i]).abs() <= 1e-3);
                assert!((c2[i] - p2[i]).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn mutation_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let mut x: Vec<f64> = (0..5).map(|_| rng.random()).collect();
            polynomial_mutation(&mut x, 20.0, 1.0, &[0.0; 5], &[1.0; 5], &mut rng);
            assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn select_all_keeps_pool() {
        let pool = scored(&[[0.0, 1.0], [1.0, 0.0], [2.0, 2.0], [0.5, 0.5]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut idx = environmental_select(&pool, 4, &das_dennis(2, 3), &mut rng).unwrap();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert!(environmental_select(&pool, 5, &das_dennis(2, 3), &mut rng).is_err());
    }

    #[test]
    fn single_survivor_is_nondominated() {
        let pool = scored(&[[0.0, 0.0], [1.0, 0.5], [0.5, 1.0], [2.0, 2.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(environmental_select(&pool, 1, &das_dennis(2, 3), &mut rng).unwrap(), vec![0]);
    }

    #[test]
    fn niching_picks_nearest_point_per_direction() {
        // all mutually non-dominated; the axis points sit exactly on the two directions
        let pool = scored(&[[0.1, 0.95], [0.0, 1.0], [0.9, 0.12], [1.0, 0.0]]);
        let dirs = das_dennis(2, 1);
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = environmental_select(&pool, 2, &dirs, &mut rng).unwrap();
            idx.sort();
            assert_eq!(idx, vec![1, 3]);
        }
    }

    #[test]
    fn selection_has_no_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pool = SurrogatePopulation::default();
        for i in 0..60 {
            let a: f64 = rng.random();
            pool.push(vec![i as f64], vec![a, 1.0 - a + rng.random::<f64>() * 0.3], vec![0.0; 2]);
        }
        let dirs = das_dennis(2, 19);
        let mut idx = environmental_select(&pool, 25, &dirs, &mut rng).unwrap();
        assert_eq!(idx.len(), 25);
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 25);
    }

    #[test]
    fn default_direction_counts() {
        let c = EvolveConfig::default();
        assert_eq!(c.directions(2).len(), 20);
        assert_eq!(c.directions(3).len(), 21);
    }

    #[test]
    fn unknown_generator_is_config_error() {
        let c = EvolveConfig {
            generator: "diffusion".into(),
            ..EvolveConfig::default()
        };
        assert!(matches!(generator_by_name(&c), Err(Error::Config { .. })));
    }
}
