//! ZDT and DTLZ benchmark problems, Latin hypercube initialization and
//! true-evaluation budget bookkeeping.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pareto;
use crate::scalar::Scalar;

/// Per-axis hypervolume reference coordinate in the normalized objective box.
pub const HV_REFERENCE: f64 = 1.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProblemKind {
    Zdt1,
    Zdt2,
    Zdt3,
    Dtlz2,
    Dtlz3,
    Dtlz4,
    Dtlz5,
    Dtlz6,
    Dtlz7,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 9] = [
        ProblemKind::Zdt1,
        ProblemKind::Zdt2,
        ProblemKind::Zdt3,
        ProblemKind::Dtlz2,
        ProblemKind::Dtlz3,
        ProblemKind::Dtlz4,
        ProblemKind::Dtlz5,
        ProblemKind::Dtlz6,
        ProblemKind::Dtlz7,
    ];

    pub fn is_zdt(self) -> bool {
        matches!(self, ProblemKind::Zdt1 | ProblemKind::Zdt2 | ProblemKind::Zdt3)
    }

    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Zdt1 => "zdt1",
            ProblemKind::Zdt2 => "zdt2",
            ProblemKind::Zdt3 => "zdt3",
            ProblemKind::Dtlz2 => "dtlz2",
            ProblemKind::Dtlz3 => "dtlz3",
            ProblemKind::Dtlz4 => "dtlz4",
            ProblemKind::Dtlz5 => "dtlz5",
            ProblemKind::Dtlz6 => "dtlz6",
            ProblemKind::Dtlz7 => "dtlz7",
        }
    }

    /// Objective count used by the harness when a task string omits `m`.
    pub fn default_objectives(self) -> usize {
        if self.is_zdt() {
            2
        } else {
            3
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        ProblemKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::config(s, "unknown problem"))
    }
}

/// A benchmark instance: family, decision dimension, objective count and box bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub d: usize,
    pub m: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ProblemSpec {
    pub fn new(kind: ProblemKind, d: usize, m: usize) -> Result<Self> {
        let token = format!("{kind}:d={d}:m={m}");
        if kind.is_zdt() && m != 2 {
            return Err(Error::config(token, "ZDT problems have exactly 2 objectives"));
        }
        if !kind.is_zdt() && !(2..=3).contains(&m) {
            return Err(Error::config(token, "DTLZ problems support m in {2, 3}"));
        }
        if kind.is_zdt() && d < 2 {
            return Err(Error::config(token, "ZDT needs d >= 2"));
        }
        if !kind.is_zdt() && d < m {
            return Err(Error::config(token, "DTLZ needs d >= m"));
        }
        Ok(Self {
            kind,
            d,
            m,
            lower: vec![0.0; d],
            upper: vec![1.0; d],
        })
    }

    /// Number of DTLZ distance variables `k = d - m + 1`.
    pub fn distance_vars(&self) -> usize {
        self.d + 1 - self.m
    }

    pub fn in_bounds<T: Scalar>(&self, x: &[T]) -> bool {
        x.len() == self.d
            && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(&v, (&lo, &hi))| {
                let v = v.as_f64();
                v >= lo && v <= hi
            })
    }

    /// True objective vector (minimization).
    pub fn evaluate<T: Scalar>(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.d {
            return Err(Error::Domain(format!(
                "{}: expected {} variables, got {}",
                self.kind,
                self.d,
                x.len()
            )));
        }
        if !self.in_bounds(x) {
            return Err(Error::Domain(format!("{}: input outside bounds", self.kind)));
        }
        Ok(match self.kind {
            ProblemKind::Zdt1 | ProblemKind::Zdt2 | ProblemKind::Zdt3 => self.zdt(x),
            ProblemKind::Dtlz2 | ProblemKind::Dtlz3 | ProblemKind::Dtlz4 => self.dtlz_sphere(x),
            ProblemKind::Dtlz5 | ProblemKind::Dtlz6 => self.dtlz_degenerate(x),
            ProblemKind::Dtlz7 => self.dtlz7(x),
        })
    }

    fn zdt<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let one = T::one();
        let f1 = x[0];
        let tail: T = x[1..].iter().copied().sum();
        let g = one + T::lit(9.0) * tail / T::from_usize_lossy(self.d - 1);
        let ratio = f1 / g;
        let h = match self.kind {
            ProblemKind::Zdt1 => one - ratio.sqrt(),
            ProblemKind::Zdt2 => one - ratio * ratio,
            _ => one - ratio.sqrt() - ratio * (T::lit(10.0 * PI) * f1).sin(),
        };
        vec![f1, g * h]
    }

    fn dtlz_sphere<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let m = self.m;
        let half = T::lit(0.5);
        let tail = &x[m - 1..];
        let g = match self.kind {
            ProblemKind::Dtlz3 => {
                let s: T = tail
                    .iter()
                    .map(|&v| (v - half) * (v - half) - (T::lit(20.0 * PI) * (v - half)).cos())
                    .sum();
                T::lit(100.0) * (T::from_usize_lossy(tail.len()) + s)
            }
            _ => tail.iter().map(|&v| (v - half) * (v - half)).sum(),
        };
        let alpha = if self.kind == ProblemKind::Dtlz4 { 100.0 } else { 1.0 };
        let angles: Vec<T> = x[..m - 1]
            .iter()
            .map(|&v| v.powf(T::lit(alpha)) * T::lit(PI / 2.0))
            .collect();
        spherical(&angles, g, m)
    }

    fn dtlz_degenerate<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let m = self.m;
        let tail = &x[m - 1..];
        let g: T = if self.kind == ProblemKind::Dtlz6 {
            tail.iter().map(|&v| v.powf(T::lit(0.1))).sum()
        } else {
            let half = T::lit(0.5);
            tail.iter().map(|&v| (v - half) * (v - half)).sum()
        };
        let mut angles = Vec::with_capacity(m - 1);
        angles.push(x[0] * T::lit(PI / 2.0));
        for &v in &x[1..m - 1] {
            let th = T::lit(PI / 4.0) / (T::one() + g) * (T::one() + T::lit(2.0) * g * v);
            angles.push(th);
        }
        spherical(&angles, g, m)
    }

    fn dtlz7<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let m = self.m;
        let tail = &x[m - 1..];
        let s: T = tail.iter().copied().sum();
        let g = T::one() + T::lit(9.0) * s / T::from_usize_lossy(tail.len());
        let mut f: Vec<T> = x[..m - 1].to_vec();
        let h = T::from_usize_lossy(m)
            - f.iter()
                .map(|&fj| fj / (T::one() + g) * (T::one() + (T::lit(3.0 * PI) * fj).sin()))
                .sum::<T>();
        f.push((T::one() + g) * h);
        f
    }

    /// Ideal and nadir points of the analytic Pareto front, used to normalize
    /// objective vectors before computing hypervolume.
    pub fn front_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let m = self.m;
        match (self.kind, m) {
            (ProblemKind::Zdt1 | ProblemKind::Zdt2, _) => (vec![0.0, 0.0], vec![1.0, 1.0]),
            (ProblemKind::Zdt3, _) => (vec![0.0, -0.773369012], vec![0.851833, 1.0]),
            (ProblemKind::Dtlz2 | ProblemKind::Dtlz3 | ProblemKind::Dtlz4, _) => {
                (vec![0.0; m], vec![1.0; m])
            }
            (ProblemKind::Dtlz5 | ProblemKind::Dtlz6, 2) => (vec![0.0; 2], vec![1.0; 2]),
            (ProblemKind::Dtlz5 | ProblemKind::Dtlz6, _) => {
                let r = std::f64::consts::FRAC_1_SQRT_2;
                (vec![0.0; 3], vec![r, r, 1.0])
            }
            (ProblemKind::Dtlz7, 2) => (vec![0.0, 2.307004366], vec![0.859401, 4.0]),
            (ProblemKind::Dtlz7, _) => (vec![0.0, 0.0, 2.614008731], vec![0.859401, 0.859401, 6.0]),
        }
    }

    /// Maps an objective vector onto the unit-scaled front box.
    pub fn normalize_objectives(&self, y: &[f64]) -> Vec<f64> {
        let (ideal, nadir) = self.front_bounds();
        y.iter()
            .zip(ideal.iter().zip(&nadir))
            .map(|(&v, (&lo, &hi))| (v - lo) / (hi - lo))
            .collect()
    }

    /// Hypervolume of `ys` after front-box normalization, against the point `HV_REFERENCE` on every axis.
    pub fn normalized_hypervolume(&self, ys: &[Vec<f64>]) -> Result<f64> {
        let pts: Vec<Vec<f64>> = ys.iter().map(|y| self.normalize_objectives(y)).collect();
        pareto::hypervolume(&pts, &vec![HV_REFERENCE; self.m])
    }

    pub fn task_string(&self) -> String {
        format!("{}:d={}:m={}", self.kind, self.d, self.m)
    }
}

impl fmt::Display for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.task_string())
    }
}

impl FromStr for ProblemSpec {
    type Err = Error;

    /// Parses `name[:d=<dim>][:m=<objectives>]`, e.g. `zdt1:d=30:m=2`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let kind: ProblemKind = parts.next().unwrap_or_default().parse()?;
        let mut d = None;
        let mut m = None;
        for part in parts {
            let (key, val) = part
                .split_once('=')
                .ok_or_else(|| Error::config(part, "expected key=value"))?;
            let v: usize = val
                .trim()
                .parse()
                .map_err(|_| Error::config(part, "expected a positive integer"))?;
            match key.trim() {
                "d" => d = Some(v),
                "m" => m = Some(v),
                _ => return Err(Error::config(part, "unknown task key")),
            }
        }
        let d = d.ok_or_else(|| Error::config(s, "missing d=<dim>"))?;
        ProblemSpec::new(kind, d, m.unwrap_or_else(|| kind.default_objectives()))
    }
}

fn spherical<T: Scalar>(angles: &[T], g: T, m: usize) -> Vec<T> {
    let r = T::one() + g;
    (0..m)
        .map(|j| {
            let mut v = r;
            for a in &angles[..m - 1 - j] {
                v *= a.cos();
            }
            if j > 0 {
                v *= angles[m - 1 - j].sin();
            }
            v
        })
        .collect()
}

/// Latin hypercube sample of `n` points inside the problem box: every axis has
/// exactly one point in each of its `n` equal strata, jittered uniformly.
pub fn lhs_init(spec: &ProblemSpec, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lhs_with_rng(spec, n, &mut rng)
}

pub fn lhs_with_rng<R: Rng + ?Sized>(spec: &ProblemSpec, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; spec.d]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for j in 0..spec.d {
        strata.shuffle(rng);
        let (lo, hi) = (spec.lower[j], spec.upper[j]);
        for (row, &s) in out.iter_mut().zip(&strata) {
            let u = (s as f64 + rng.random::<f64>()) / n as f64;
            row[j] = (lo + u * (hi - lo)).min(hi);
        }
    }
    out
}

/// True-evaluation counter: `n_init <= t <= fe_max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetState {
    pub t: usize,
    pub fe_max: usize,
    pub n_init: usize,
}

impl BudgetState {
    pub const DEFAULT_N_INIT: usize = 80;
    pub const DEFAULT_FE_MAX: usize = 120;

    pub fn new(n_init: usize, fe_max: usize) -> Result<Self> {
        if n_init == 0 || n_init >= fe_max {
            return Err(Error::config(
                format!("n_init={n_init},fe_max={fe_max}"),
                "need 0 < n_init < fe_max",
            ));
        }
        Ok(Self {
            t: n_init,
            fe_max,
            n_init,
        })
    }

    pub fn remaining(&self) -> usize {
        self.fe_max - self.t
    }

    pub fn exhausted(&self) -> bool {
        self.t >= self.fe_max
    }

    /// Fraction of the budget consumed.
    pub fn progress(&self) -> f64 {
        self.t as f64 / self.fe_max as f64
    }

    pub fn consume(&mut self, k: usize) -> Result<()> {
        if self.t + k > self.fe_max {
            return Err(Error::contract(format!(
                "budget overrun: t={} + {k} > {}",
                self.t, self.fe_max
            )));
        }
        self.t += k;
        Ok(())
    }
}

impl Default for BudgetState {
    fn default() -> Self {
        Self::new(Self::DEFAULT_N_INIT, Self::DEFAULT_FE_MAX).expect("valid defaults")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(kind: ProblemKind, d: usize, m: usize) -> ProblemSpec {
        ProblemSpec::new(kind, d, m).unwrap()
    }

    #[test]
    fn zdt1_hand_points() {
        let p = spec(ProblemKind::Zdt1, 3, 2);
        assert_eq!(p.evaluate(&[0.0, 0.0, 0.0]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(p.evaluate(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn zdt2_and_zdt3_hand_points() {
        // g = 1 + 9 * 0.5 = 5.5 ; f1 = 0.5
        let y = spec(ProblemKind::Zdt2, 2, 2).evaluate(&[0.5, 0.5]).unwrap();
        assert!((y[1] - 5.5 * (1.0 - (0.5f64 / 5.5).powi(2))).abs() < 1e-12);
        let y = spec(ProblemKind::Zdt3, 2, 2).evaluate(&[0.25, 0.0]).unwrap();
        let expect = 1.0 - 0.5 - 0.25 * (2.5 * PI).sin();
        assert!((y[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn dtlz2_center_point() {
        let y = spec(ProblemKind::Dtlz2, 5, 2).evaluate(&[0.5; 5]).unwrap();
        let r = 2f64.sqrt() / 2.0;
        assert!((y[0] - r).abs() < 1e-12 && (y[1] - r).abs() < 1e-12);
    }

    #[test]
    fn dtlz3_multimodal_g_vanishes_at_half() {
        let y = spec(ProblemKind::Dtlz3, 6, 3).evaluate::<f64>(&[0.0, 1.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
        // angles (0, pi/2): the whole radius lands on f2
        assert!(y[0].abs() < 1e-12 && (y[1] - 1.0).abs() < 1e-12 && y[2].abs() < 1e-12);
    }

    #[test]
    fn dtlz7_minimal_distance_variables() {
        let p = spec(ProblemKind::Dtlz7, 6, 3);
        let x = [0.3, 0.6, 0.0, 0.0, 0.0, 0.0];
        let y = p.evaluate(&x).unwrap();
        // distance variables at zero: g takes its minimum 1, so 1 + g = 2
        let h = 3.0
            - x[..2]
                .iter()
                .map(|&f| f / 2.0 * (1.0 + (3.0 * PI * f).sin()))
                .sum::<f64>();
        assert_eq!(&y[..2], &[0.3, 0.6]);
        assert!((y[2] - 2.0 * h).abs() < 1e-12);
    }

    #[test]
    fn dtlz5_and_6_on_front_are_unit_sphere() {
        for kind in [ProblemKind::Dtlz5, ProblemKind::Dtlz6] {
            let mut x = vec![0.3, 0.8, 0.5, 0.5];
            if kind == ProblemKind::Dtlz6 {
                x[2] = 0.0;
                x[3] = 0.0;
            }
            let y = spec(kind, 4, 3).evaluate(&x).unwrap();
            let sq: f64 = y.iter().map(|v| v * v).sum();
            assert!((sq - 1.0).abs() < 1e-9, "{kind}");
            // degenerate: theta_2 = pi/4 when g = 0
            assert!((y[0] - y[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_is_domain_error() {
        let p = spec(ProblemKind::Zdt1, 3, 2);
        assert!(matches!(p.evaluate(&[1.5, 0.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(p.evaluate(&[0.5, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn objective_count_rules() {
        assert!(ProblemSpec::new(ProblemKind::Zdt1, 5, 3).is_err());
        assert!(ProblemSpec::new(ProblemKind::Dtlz2, 5, 4).is_err());
        assert!(ProblemSpec::new(ProblemKind::Dtlz2, 5, 3).is_ok());
    }

    #[test]
    fn task_string_parsing() {
        let p: ProblemSpec = "zdt1:d=30:m=2".parse().unwrap();
        assert_eq!((p.kind, p.d, p.m), (ProblemKind::Zdt1, 30, 2));
        let q: ProblemSpec = "DTLZ7:d=12".parse().unwrap();
        assert_eq!(q.m, 3);
        assert_eq!(q.task_string(), "dtlz7:d=12:m=3");
        match "zdt9:d=3".parse::<ProblemSpec>() {
            Err(Error::Config { token, .. }) => assert_eq!(token, "zdt9"),
            other => panic!("{other:?}"),
        }
        match "zdt1:d=x".parse::<ProblemSpec>() {
            Err(Error::Config { token, .. }) => assert_eq!(token, "d=x"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lhs_quartiles_and_determinism() {
        let p = spec(ProblemKind::Zdt1, 2, 2);
        let x = lhs_init(&p, 4, 7);
        for j in 0..2 {
            let mut cells: Vec<usize> = x.iter().map(|r| (r[j] * 4.0).floor().min(3.0) as usize).collect();
            cells.sort();
            assert_eq!(cells, vec![0, 1, 2, 3]);
        }
        assert_eq!(lhs_init(&p, 4, 7), x);
        let one = lhs_init(&p, 1, 3);
        assert_eq!(one.len(), 1);
        assert!(one[0].iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn budget_accounting() {
        let mut b = BudgetState::default();
        assert_eq!((b.t, b.fe_max, b.n_init), (80, 120, 80));
        assert_eq!(b.remaining(), 40);
        b.consume(40).unwrap();
        assert!(b.exhausted());
        assert!(b.consume(1).is_err());
        assert!(BudgetState::new(10, 10).is_err());
    }

    #[test]
    fn front_bound_constants_match_dense_fronts() {
        // ZDT3 front (g = 1): nondominated part of f2 = 1 - sqrt(f1) - f1 sin(10 pi f1)
        let n = 200_000;
        let mut pts: Vec<(f64, f64)> = (0..=n)
            .map(|i| {
                let f1 = i as f64 / n as f64;
                (f1, 1.0 - f1.sqrt() - f1 * (10.0 * PI * f1).sin())
            })
            .collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut best = f64::INFINITY;
        let (mut f1max, mut f2min) = (0.0f64, f64::INFINITY);
        for (a, b) in pts {
            if b < best {
                best = b;
                f1max = f1max.max(a);
                f2min = f2min.min(b);
            }
        }
        let (ideal, nadir) = spec(ProblemKind::Zdt3, 5, 2).front_bounds();
        assert!((nadir[0] - f1max).abs() < 1e-4);
        assert!((ideal[1] - f2min).abs() < 1e-6);

        let t_max = (0..=n)
            .map(|i| {
                let f = i as f64 / n as f64;
                f / 2.0 * (1.0 + (3.0 * PI * f).sin())
            })
            .fold(f64::MIN, f64::max);
        let (i2, _) = spec(ProblemKind::Dtlz7, 5, 2).front_bounds();
        let (i3, _) = spec(ProblemKind::Dtlz7, 5, 3).front_bounds();
        assert!((i2[1] - 2.0 * (2.0 - t_max)).abs() < 1e-6);
        assert!((i3[2] - 2.0 * (3.0 - 2.0 * t_max)).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn outputs_finite_in_bounds(kind_idx in 0usize..9, seed in 0u64..1000, d in 4usize..12) {
            let kind = ProblemKind::ALL[kind_idx];
            let p = ProblemSpec::new(kind, d, kind.default_objectives()).unwrap();
            for x in lhs_init(&p, 5, seed) {
                let y = p.evaluate(&x).unwrap();
                prop_assert!(y.iter().all(|v| v.is_finite()));
            }
        }

        #[test]
        fn zdt1_optimal_points_on_curve(f1 in 0.0f64..=1.0, d in 2usize..30) {
            let mut x = vec![0.0; d];
            x[0] = f1;
            let y = spec(ProblemKind::Zdt1, d, 2).evaluate(&x).unwrap();
            prop_assert!((y[1] - (1.0 - f1.sqrt())).abs() <= 1e-12);
        }

        #[test]
        fn dtlz2_optimal_points_on_sphere(a in 0.0f64..=1.0, b in 0.0f64..=1.0, m in 2usize..=3) {
            let mut x = vec![0.5; 7];
            x[0] = a;
            if m == 3 { x[1] = b; }
            let y = spec(ProblemKind::Dtlz2, 7, m).evaluate(&x).unwrap();
            let sq: f64 = y.iter().map(|v| v * v).sum();
            prop_assert!((sq - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn lhs_stratified(n in 1usize..=64, d in 1usize..=30, seed in 0u64..50) {
            let p = ProblemSpec { kind: ProblemKind::Zdt1, d, m: 2, lower: vec![0.0; d], upper: vec![1.0; d] };
            let x = lhs_init(&p, n, seed);
            prop_assert_eq!(x.len(), n);
            for j in 0..d {
                let mut seen = vec![false; n];
                for row in &x {
                    let cell = ((row[j] * n as f64).floor() as usize).min(n - 1);
                    prop_assert!(!seen[cell]);
                    seen[cell] = true;
                }
            }
        }
    }
}
