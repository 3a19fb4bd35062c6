//! Exhaustive checks of the bound and its proof steps on finite spaces.
//!
//! A [`DiscreteScenario`] fixes `p_S(x,y)`, `p_T(x,y)`, a channel `p(z|x)` and
//! a classifier `p̂(y|z)`; every quantity below is an exact finite sum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Normalization tolerance for probability tables.
pub const NORM_TOL: f64 = 1e-12;
/// Slack allowed on inequality and identity checks.
pub const INEQ_TOL: f64 = 1e-10;
/// Tolerance on assumption equalities.
pub const ASSUMPTION_TOL: f64 = 1e-9;

/// A finite distribution. A joint over pairs keeps its table shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDist {
    labels: Vec<String>,
    probs: Vec<f64>,
    shape: Option<(usize, usize)>,
}

impl DiscreteDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let labels = (0..probs.len()).map(|i| i.to_string()).collect();
        Self::with_labels(labels, probs)
    }

    pub fn with_labels(labels: Vec<String>, probs: Vec<f64>) -> Result<Self> {
        ensure!(!probs.is_empty(), "empty distribution");
        ensure!(labels.len() == probs.len(), "{} labels for {} outcomes", labels.len(), probs.len());
        ensure!(probs.iter().all(|p| p.is_finite() && *p >= 0.0 && *p <= 1.0 + NORM_TOL), "probabilities must lie in [0, 1]");
        let total: f64 = probs.iter().sum();
        ensure!((total - 1.0).abs() <= NORM_TOL, "probabilities sum to {total}, not 1");
        Ok(Self { labels, probs, shape: None })
    }

    /// Joint over `(a, b)` from a row-major table.
    pub fn from_table(table: &[Vec<f64>]) -> Result<Self> {
        ensure!(!table.is_empty() && !table[0].is_empty(), "empty table");
        let cols = table[0].len();
        ensure!(table.iter().all(|r| r.len() == cols), "ragged table");
        let mut labels = Vec::with_capacity(table.len() * cols);
        for a in 0..table.len() {
            for b in 0..cols {
                labels.push(format!("({a},{b})"));
            }
        }
        let mut d = Self::with_labels(labels, table.concat())?;
        d.shape = Some((table.len(), cols));
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.shape
    }

    /// Dirichlet draw with concentration `alpha`, redrawn until every entry
    /// is positive in floating point.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize, alpha: f64) -> Self {
        Self::new(random_simplex(rng, n, alpha)).expect("normalized draw")
    }
}

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    loop {
        let g: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = g.iter().sum();
        if total > 0.0 && g.iter().all(|v| *v / total > 1e-300) {
            return normalize(g);
        }
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

fn kl_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure!(p.len() == q.len(), "outcome spaces differ: {} vs {}", p.len(), q.len());
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::InfiniteKl { outcome: i });
            }
            acc += pi * (pi / qi).ln();
        }
    }
    Ok(acc)
}

/// `sum p log(p/q)` with `0 log(0/q) = 0`.
pub fn exact_kl(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    kl_slices(&p.probs, &q.probs)
}

/// `sum |p - q|`, not halved.
pub fn total_variation_integral(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    ensure!(p.len() == q.len(), "outcome spaces differ: {} vs {}", p.len(), q.len());
    Ok(p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum())
}

/// `(sum over {p >= q} of (p - q), half of sum |p - q|)`; equal on every pair.
pub fn tv_halving(p: &DiscreteDist, q: &DiscreteDist) -> Result<(f64, f64)> {
    let half = 0.5 * total_variation_integral(p, q)?;
    let positive = p.probs.iter().zip(&q.probs).filter(|(a, b)| a >= b).map(|(a, b)| a - b).sum();
    Ok((positive, half))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinskerCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `(sum |p - q|)^2 <= 2 KL[p | q]`.
pub fn check_pinsker(p: &DiscreteDist, q: &DiscreteDist) -> Result<PinskerCheck> {
    let tv = total_variation_integral(p, q)?;
    let lhs = tv * tv;
    let rhs = 2.0 * exact_kl(p, q)?;
    Ok(PinskerCheck { lhs, rhs, holds: lhs <= rhs + NORM_TOL })
}

pub fn entropy(p: &DiscreteDist) -> f64 {
    -p.probs.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// `I(a; b)` of a joint built with [`DiscreteDist::from_table`].
pub fn mutual_information(joint: &DiscreteDist) -> Result<f64> {
    let (rows, cols) = joint.shape.ok_or_else(|| Error::contract("mutual information needs a joint table"))?;
    Ok(mi_table(&to_rows(&joint.probs, rows, cols)))
}

fn to_rows(flat: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|r| flat[r * cols..(r + 1) * cols].to_vec()).collect()
}

fn row_sums(t: &[Vec<f64>]) -> Vec<f64> {
    t.iter().map(|r| r.iter().sum()).collect()
}

fn col_sums(t: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; t[0].len()];
    for r in t {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out
}

fn mi_table(t: &[Vec<f64>]) -> f64 {
    let (pa, pb) = (row_sums(t), col_sums(t));
    let mut acc = 0.0;
    for (a, row) in t.iter().enumerate() {
        for (b, &v) in row.iter().enumerate() {
            if v > 0.0 {
                acc += v * (v / (pa[a] * pb[b])).ln();
            }
        }
    }
    acc
}

/// Finite source/target joints, a shared channel and a classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteScenario {
    /// `|X| x |Y|`.
    pub p_source: Vec<Vec<f64>>,
    /// `|X| x |Y|`.
    pub p_target: Vec<Vec<f64>>,
    /// `p(z|x)`, `|X| x |Z|`.
    pub channel: Vec<Vec<f64>>,
    /// `p̂(y|z)`, `|Z| x |Y|`.
    pub classifier: Vec<Vec<f64>>,
    /// Loss bound.
    pub m: f64,
}

fn check_stochastic(name: &str, t: &[Vec<f64>], rows: usize, cols: usize) -> Result<()> {
    ensure!(t.len() == rows && t.iter().all(|r| r.len() == cols), "{name} must be {rows}x{cols}");
    for (i, r) in t.iter().enumerate() {
        ensure!(r.iter().all(|v| v.is_finite() && (0.0..=1.0 + NORM_TOL).contains(v)), "{name} row {i} has entries outside [0, 1]");
        let s: f64 = r.iter().sum();
        ensure!((s - 1.0).abs() <= NORM_TOL, "{name} row {i} sums to {s}");
    }
    Ok(())
}

fn check_joint(name: &str, t: &[Vec<f64>], rows: usize, cols: usize) -> Result<()> {
    ensure!(t.len() == rows && t.iter().all(|r| r.len() == cols), "{name} must be {rows}x{cols}");
    ensure!(t.iter().flatten().all(|v| v.is_finite() && (0.0..=1.0 + NORM_TOL).contains(v)), "{name} has entries outside [0, 1]");
    let s: f64 = t.iter().flatten().sum();
    ensure!((s - 1.0).abs() <= NORM_TOL, "{name} sums to {s}");
    Ok(())
}

/// `sum_x p(x,y) p(z|x)` as a `|Z| x |Y|` table.
fn push_through(joint_xy: &[Vec<f64>], channel: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (nz, ny) = (channel[0].len(), joint_xy[0].len());
    let mut out = vec![vec![0.0; ny]; nz];
    for (x, row) in joint_xy.iter().enumerate() {
        for (z, &c) in channel[x].iter().enumerate() {
            for (y, &p) in row.iter().enumerate() {
                out[z][y] += p * c;
            }
        }
    }
    out
}

/// `E_{p_T(a)} KL[p_T(y|a) | p_S(y|a)]` for joints indexed `[a][y]`.
fn expected_conditional_kl(target: &[Vec<f64>], source: &[Vec<f64>]) -> Result<f64> {
    let (ta, sa) = (row_sums(target), row_sums(source));
    let mut acc = 0.0;
    for a in 0..target.len() {
        if ta[a] > 0.0 {
            if sa[a] <= 0.0 {
                return Err(Error::InfiniteKl { outcome: a });
            }
            let pt: Vec<f64> = target[a].iter().map(|v| v / ta[a]).collect();
            let ps: Vec<f64> = source[a].iter().map(|v| v / sa[a]).collect();
            acc += ta[a] * kl_slices(&pt, &ps)?;
        }
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainDecomposition {
    pub joint_kl: f64,
    pub marginal_kl: f64,
    pub expected_cond_kl: f64,
    pub residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Check {
    pub l_test: f64,
    pub l_train: f64,
    pub bound_rhs: f64,
    pub holds: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop2Check {
    pub lhs: f64,
    pub rhs: f64,
    pub assumptions_hold: bool,
    /// `None` when the assumptions fail.
    pub holds: Option<bool>,
}

impl DiscreteScenario {
    /// Validates shapes and normalization. Support overlap is checked by the
    /// operations that need it.
    pub fn new(
        p_source: Vec<Vec<f64>>,
        p_target: Vec<Vec<f64>>,
        channel: Vec<Vec<f64>>,
        classifier: Vec<Vec<f64>>,
        m: f64,
    ) -> Result<Self> {
        let s = Self { p_source, p_target, channel, classifier, m };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.m > 0.0 && self.m.is_finite(), "M must be positive");
        ensure!(!self.p_source.is_empty() && !self.p_source[0].is_empty(), "empty source table");
        ensure!(!self.channel.is_empty() && !self.channel[0].is_empty(), "empty channel");
        let (nx, ny, nz) = (self.nx(), self.ny(), self.nz());
        check_joint("p_source", &self.p_source, nx, ny)?;
        check_joint("p_target", &self.p_target, nx, ny)?;
        check_stochastic("channel", &self.channel, nx, nz)?;
        check_stochastic("classifier", &self.classifier, nz, ny)?;
        Ok(())
    }

    pub fn nx(&self) -> usize {
        self.p_source.len()
    }

    pub fn ny(&self) -> usize {
        self.p_source[0].len()
    }

    pub fn nz(&self) -> usize {
        self.channel[0].len()
    }

    /// `p_S(x,y) > 0` wherever `p_T(x,y) > 0`.
    pub fn has_shared_support(&self) -> bool {
        self.p_target.iter().flatten().zip(self.p_source.iter().flatten()).all(|(t, s)| *t == 0.0 || *s > 0.0)
    }

    pub fn source_zy(&self) -> Vec<Vec<f64>> {
        push_through(&self.p_source, &self.channel)
    }

    pub fn target_zy(&self) -> Vec<Vec<f64>> {
        push_through(&self.p_target, &self.channel)
    }
}

/// `KL[p_T(z,y) | p_S(z,y)] = KL[p_T(z) | p_S(z)] + E_{p_T(z)} KL[p_T(y|z) | p_S(y|z)]`,
/// each side computed separately.
pub fn kl_chain_decomposition(s: &DiscreteScenario) -> Result<ChainDecomposition> {
    s.validate()?;
    let (src, tgt) = (s.source_zy(), s.target_zy());
    let joint_kl = kl_slices(&tgt.concat(), &src.concat())?;
    let marginal_kl = kl_slices(&row_sums(&tgt), &row_sums(&src))?;
    let expected_cond_kl = expected_conditional_kl(&tgt, &src)?;
    Ok(ChainDecomposition { joint_kl, marginal_kl, expected_cond_kl, residual: joint_kl - marginal_kl - expected_cond_kl })
}

/// Target loss of the predictive `sum_z p(z|x) p̂(y|z)` against
/// `l_train + M / sqrt 2 * sqrt KL[p_T(z,y) | p_S(z,y)]`.
pub fn check_prop1(s: &DiscreteScenario) -> Result<Prop1Check> {
    s.validate()?;
    let floor = (-s.m).exp();
    for (z, row) in s.classifier.iter().enumerate() {
        for (y, &p) in row.iter().enumerate() {
            if p < floor * (1.0 - NORM_TOL) {
                return Err(Error::Precondition(format!(
                    "classifier entry p̂({y}|{z}) = {p} is below exp(-M) = {floor}; the loss is not bounded by M"
                )));
            }
        }
    }
    let src = s.source_zy();
    let mut l_train = 0.0;
    for (z, row) in src.iter().enumerate() {
        for (y, &p) in row.iter().enumerate() {
            l_train -= p * s.classifier[z][y].ln();
        }
    }
    let mut l_test = 0.0;
    for (x, row) in s.p_target.iter().enumerate() {
        for (y, &p) in row.iter().enumerate() {
            if p > 0.0 {
                let pred: f64 = (0..s.nz()).map(|z| s.channel[x][z] * s.classifier[z][y]).sum();
                l_test -= p * pred.ln();
            }
        }
    }
    let kl = match kl_slices(&s.target_zy().concat(), &src.concat()) {
        Ok(v) => v,
        Err(Error::InfiniteKl { .. }) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    let bound_rhs = l_train + s.m / 2f64.sqrt() * kl.max(0.0).sqrt();
    Ok(Prop1Check { l_test, l_train, bound_rhs, holds: l_test <= bound_rhs + INEQ_TOL })
}

/// Representation-level conditional shift against input-level conditional
/// shift, reported only when sufficiency (`I_S(z,y) = I_S(x,y)`) and
/// `p_S(y|x) = sum_z p(z|x) p_S(y|z)` both hold.
pub fn check_prop2(s: &DiscreteScenario) -> Result<Prop2Check> {
    s.validate()?;
    if !s.has_shared_support() {
        return Err(Error::Precondition("p_T(x,y) > 0 where p_S(x,y) = 0; the density ratio is unbounded".into()));
    }
    let src_zy = s.source_zy();
    let sufficiency = (mi_table(&src_zy) - mi_table(&s.p_source)).abs() <= ASSUMPTION_TOL;
    let src_z = row_sums(&src_zy);
    let src_x = row_sums(&s.p_source);
    let mut markov = true;
    'outer: for x in 0..s.nx() {
        if src_x[x] <= 0.0 {
            continue;
        }
        for y in 0..s.ny() {
            let direct = s.p_source[x][y] / src_x[x];
            let via_z: f64 = (0..s.nz()).filter(|&z| src_z[z] > 0.0).map(|z| s.channel[x][z] * src_zy[z][y] / src_z[z]).sum();
            if (direct - via_z).abs() > ASSUMPTION_TOL {
                markov = false;
                break 'outer;
            }
        }
    }
    let assumptions_hold = sufficiency && markov;
    let lhs = expected_conditional_kl(&s.target_zy(), &src_zy)?;
    let rhs = expected_conditional_kl(&s.p_target, &s.p_source)?;
    Ok(Prop2Check { lhs, rhs, assumptions_hold, holds: assumptions_hold.then_some(lhs <= rhs + INEQ_TOL) })
}

/// Dirichlet draw with a randomly chosen concentration.
fn dirichlet<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let alpha = pick_alpha(rng);
    random_simplex(rng, n, alpha)
}

fn random_joint<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    to_rows(&dirichlet(rng, rows * cols), rows, cols)
}

fn random_channel<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let alpha = pick_alpha(rng);
    (0..rows).map(|_| random_simplex(rng, cols, alpha)).collect()
}

/// Classifier rows `p K + exp(-M)`, so every entry is at least `exp(-M)`.
fn bounded_classifier<R: Rng + ?Sized>(rng: &mut R, nz: usize, ny: usize, m: f64) -> Vec<Vec<f64>> {
    let floor = (-m).exp();
    let k = 1.0 - floor * ny as f64;
    (0..nz)
        .map(|_| {
            let row: Vec<f64> = random_simplex(rng, ny, 0.5).into_iter().map(|p| p * k + floor).collect();
            normalize(row)
        })
        .collect()
}

fn pick_alpha<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    [0.3, 1.0, 3.0][rng.random_range(0..3)]
}

/// Random full-support scenario with `|X|, |Y|, |Z|` in `2..=max_size`.
/// About a fifth of draws pile target mass where the source is thin.
pub fn random_scenario<R: Rng + ?Sized>(rng: &mut R, max_size: usize, m: f64) -> DiscreteScenario {
    let (nx, ny, nz) = (rng.random_range(2..=max_size), rng.random_range(2..=max_size), rng.random_range(2..=max_size));
    let p_source = random_joint(rng, nx, ny);
    let p_target = if rng.random_bool(0.2) {
        // concentrate on the cell where the source has least mass
        let flat = p_source.concat();
        let (argmin, _) = flat.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        let mut t = random_simplex(rng, nx * ny, 1.0).into_iter().map(|v| 0.05 * v).collect::<Vec<_>>();
        t[argmin] += 0.95;
        to_rows(&t, nx, ny)
    } else {
        random_joint(rng, nx, ny)
    };
    let channel = random_channel(rng, nx, nz);
    let classifier = bounded_classifier(rng, nz, ny, m);
    DiscreteScenario { p_source, p_target, channel, classifier, m }
}

/// Scenario whose channel deterministically merges `x` values that share a
/// source label row, so both assumptions hold by construction.
pub fn sufficient_statistic_scenario<R: Rng + ?Sized>(rng: &mut R, max_size: usize, m: f64) -> DiscreteScenario {
    let ny = rng.random_range(2..=max_size);
    let groups = rng.random_range(1..=max_size.min(4));
    let nx = rng.random_range(groups.max(2)..=max_size.max(groups + 1));
    let mut group_of: Vec<usize> = (0..nx).map(|x| if x < groups { x } else { rng.random_range(0..groups) }).collect();
    // shuffle assignments so merged x values are not always adjacent
    for i in (1..nx).rev() {
        let j = rng.random_range(0..=i);
        group_of.swap(i, j);
    }
    let rows: Vec<Vec<f64>> = (0..groups).map(|_| dirichlet(rng, ny)).collect();
    let px = dirichlet(rng, nx);
    let p_source: Vec<Vec<f64>> = (0..nx).map(|x| rows[group_of[x]].iter().map(|r| px[x] * r).collect()).collect();
    let p_source = to_rows(&normalize(p_source.concat()), nx, ny);
    let p_target = random_joint(rng, nx, ny);
    let channel: Vec<Vec<f64>> = (0..nx).map(|x| (0..groups).map(|g| if g == group_of[x] { 1.0 } else { 0.0 }).collect()).collect();
    let classifier = bounded_classifier(rng, groups, ny, m);
    DiscreteScenario { p_source, p_target, channel, classifier, m }
}

/// Sizes of the verification sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepConfig {
    pub seed: u64,
    pub pairs: usize,
    pub max_pair_size: usize,
    pub scenarios: usize,
    pub prop2_scenarios: usize,
    pub max_size: usize,
    pub m: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { seed: 0, pairs: 10_000, max_pair_size: 20, scenarios: 1000, prop2_scenarios: 200, max_size: 6, m: 3.0 }
    }
}

/// Outcome of one family of checks. A case passes when `slack >= -tolerance`;
/// `slack` is `rhs - lhs` for inequalities and `-|residual|` for identities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckFamily {
    pub name: String,
    pub tolerance: f64,
    pub cases: usize,
    pub passed: usize,
    pub worst_slack: f64,
    pub failures: Vec<serde_json::Value>,
}

impl CheckFamily {
    fn new(name: &str, tolerance: f64) -> Self {
        Self { name: name.into(), tolerance, cases: 0, passed: 0, worst_slack: f64::INFINITY, failures: Vec::new() }
    }

    fn record(&mut self, slack: f64, dump: impl FnOnce() -> serde_json::Value) {
        self.cases += 1;
        self.worst_slack = self.worst_slack.min(slack);
        if slack >= -self.tolerance {
            self.passed += 1;
        } else {
            self.failures.push(dump());
        }
    }

    pub fn all_passed(&self) -> bool {
        self.passed == self.cases
    }
}

/// A scenario rejected because it falls outside a statement's hypotheses.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreconditionRecord {
    pub check: String,
    pub message: String,
    pub scenario: DiscreteScenario,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config: SweepConfig,
    pub families: Vec<CheckFamily>,
    /// Representation-shift scenarios where the assumptions did not hold
    /// (no verdict).
    pub prop2_skipped: usize,
    pub preconditions: Vec<PreconditionRecord>,
    pub all_passed: bool,
}

impl VerifyReport {
    pub fn family(&self, name: &str) -> Option<&CheckFamily> {
        self.families.iter().find(|f| f.name == name)
    }
}

fn dist_dump(p: &DiscreteDist, q: &DiscreteDist) -> serde_json::Value {
    serde_json::json!({ "p": p.probs, "q": q.probs })
}

fn scenario_dump(s: &DiscreteScenario, detail: impl Serialize) -> serde_json::Value {
    serde_json::json!({ "scenario": s, "result": detail })
}

fn scenario_checks(
    s: &DiscreteScenario,
    chain: &mut CheckFamily,
    prop1: &mut CheckFamily,
    preconditions: &mut Vec<PreconditionRecord>,
) -> Result<()> {
    match kl_chain_decomposition(s) {
        Ok(c) => chain.record(-c.residual.abs(), || scenario_dump(s, c)),
        Err(Error::InfiniteKl { outcome }) => preconditions.push(PreconditionRecord {
            check: chain.name.clone(),
            message: format!("infinite KL at outcome {outcome}"),
            scenario: s.clone(),
        }),
        Err(e) => return Err(e),
    }
    match check_prop1(s) {
        Ok(c) => prop1.record(c.bound_rhs - c.l_test, || scenario_dump(s, c)),
        Err(Error::Precondition(message)) => {
            preconditions.push(PreconditionRecord { check: prop1.name.clone(), message, scenario: s.clone() })
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

/// Runs every family: Pinsker, the TV halving identity, Gibbs' inequality,
/// the KL chain rule, the target-risk bound (`prop1`) on random scenarios,
/// and the representation-shift bound (`prop2`) on identity and
/// sufficient-statistic channels. `extra` scenarios go through the chain rule
/// and target-risk checks; those violating a precondition are recorded, not
/// counted as failures.
pub fn verify_sweep(cfg: &SweepConfig, extra: &[DiscreteScenario]) -> Result<VerifyReport> {
    ensure!(cfg.max_pair_size >= 2 && cfg.max_size >= 2, "sizes must be at least 2");
    ensure!(cfg.m > 0.0 && ((-cfg.m).exp() * cfg.max_size as f64) < 1.0, "M too small for {} classes", cfg.max_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pinsker = CheckFamily::new("pinsker", NORM_TOL);
    let mut halving = CheckFamily::new("tv_halving", INEQ_TOL);
    let mut gibbs = CheckFamily::new("gibbs", NORM_TOL);
    for _ in 0..cfg.pairs {
        let n = rng.random_range(2..=cfg.max_pair_size);
        let mut p = dirichlet(&mut rng, n);
        if rng.random_bool(0.25) {
            // sparse p exercises the 0 log 0 convention
            let k = rng.random_range(0..n);
            p[k] = 0.0;
            p = normalize(p);
        }
        let p = DiscreteDist::new(p)?;
        let q = DiscreteDist::new(dirichlet(&mut rng, n))?;
        let pc = check_pinsker(&p, &q)?;
        pinsker.record(pc.rhs - pc.lhs, || dist_dump(&p, &q));
        let (pos, half) = tv_halving(&p, &q)?;
        halving.record(-(pos - half).abs(), || dist_dump(&p, &q));
        let kl = exact_kl(&p, &q)?;
        gibbs.record(kl, || dist_dump(&p, &q));
    }

    let mut chain = CheckFamily::new("kl_chain", INEQ_TOL);
    let mut prop1 = CheckFamily::new("prop1", INEQ_TOL);
    let mut preconditions = Vec::new();
    for _ in 0..cfg.scenarios {
        let s = random_scenario(&mut rng, cfg.max_size, cfg.m);
        scenario_checks(&s, &mut chain, &mut prop1, &mut preconditions)?;
    }
    for s in extra {
        scenario_checks(s, &mut chain, &mut prop1, &mut preconditions)?;
    }

    let mut prop2 = CheckFamily::new("prop2", INEQ_TOL);
    let mut prop2_skipped = 0;
    for i in 0..cfg.prop2_scenarios {
        let s = if i % 10 == 0 {
            // lossless representation
            let mut s = random_scenario(&mut rng, cfg.max_size, cfg.m);
            let nx = s.nx();
            s.channel = (0..nx).map(|x| (0..nx).map(|z| if z == x { 1.0 } else { 0.0 }).collect()).collect();
            s.classifier = bounded_classifier(&mut rng, nx, s.ny(), cfg.m);
            s
        } else {
            sufficient_statistic_scenario(&mut rng, cfg.max_size, cfg.m)
        };
        let c = check_prop2(&s)?;
        if c.assumptions_hold {
            prop2.record(c.rhs - c.lhs, || scenario_dump(&s, c));
        } else {
            prop2_skipped += 1;
        }
    }

    let families = vec![pinsker, halving, gibbs, chain, prop1, prop2];
    let all_passed = families.iter().all(CheckFamily::all_passed);
    Ok(VerifyReport { config: cfg.clone(), families, prop2_skipped, preconditions, all_passed })
}
