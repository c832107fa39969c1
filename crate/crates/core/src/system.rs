//! Markov systems `(K_{i(e)}, w_e, p_e)_{e in E}` and sampling-based checks of
//! their standing hypotheses.
//!
//! Three families are built in:
//!
//! * `planar_affine_trig`: two half-planes `K_1 = {y >= 1/2}`, `K_2 = {y <= -1/2}`
//!   of the l1-normed plane, four piecewise-affine maps and trigonometric
//!   place-dependent probabilities. Default parameters give a system with
//!   average contraction rate `209/210` although none of its maps contracts.
//! * `finite_chain`: a finite Markov chain viewed as a Markov system with
//!   constant maps on the discrete metric space `{1..N}`.
//! * `bernoulli_ifs`: affine contractions of an interval with constant weights.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, CmsError, Result};
use crate::graph::{DirectedMultigraph, Edge, EdgeId};
use crate::rng::{self, purpose, CHUNK};

/// A point `x` of some part `K_vertex`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "StateRepr", try_from = "StateRepr")]
pub struct State {
    pub vertex: usize,
    coords: [f64; 2],
    dim: u8,
}

#[derive(Serialize, Deserialize)]
struct StateRepr {
    vertex: usize,
    #[serde(default)]
    coords: Vec<f64>,
}

impl From<State> for StateRepr {
    fn from(s: State) -> Self {
        StateRepr {
            vertex: s.vertex,
            coords: s.coords().to_vec(),
        }
    }
}

impl TryFrom<StateRepr> for State {
    type Error = CmsError;

    fn try_from(r: StateRepr) -> Result<Self> {
        State::new(r.vertex, &r.coords)
    }
}

impl State {
    pub fn new(vertex: usize, coords: &[f64]) -> Result<Self> {
        match *coords {
            [] => Ok(Self::discrete(vertex)),
            [x] => Ok(Self::line(vertex, x)),
            [x, y] => Ok(Self::planar(vertex, x, y)),
            _ => input_err(format!(
                "states have at most 2 coordinates, got {}",
                coords.len()
            )),
        }
    }

    pub fn discrete(vertex: usize) -> Self {
        Self {
            vertex,
            coords: [0.0; 2],
            dim: 0,
        }
    }

    pub fn line(vertex: usize, x: f64) -> Self {
        Self {
            vertex,
            coords: [x, 0.0],
            dim: 1,
        }
    }

    pub fn planar(vertex: usize, x: f64, y: f64) -> Self {
        Self {
            vertex,
            coords: [x, y],
            dim: 2,
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords[..self.dim as usize]
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Sum of absolute coordinate differences.
    L1,
    /// 0 on equal states, 1 otherwise.
    Discrete,
}

impl Metric {
    pub fn distance(self, a: &State, b: &State) -> f64 {
        match self {
            Metric::L1 => a
                .coords()
                .iter()
                .zip(b.coords())
                .map(|(x, y)| (x - y).abs())
                .sum(),
            Metric::Discrete => {
                if a.vertex == b.vertex && a.coords() == b.coords() {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trig {
    Sin,
    Cos,
}

/// `(x, y) -> (a * x' + b, c * y + d)` with `x' = |x|` when `x_abs` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarMap {
    pub x_coef: f64,
    pub x_offset: f64,
    #[serde(default)]
    pub x_abs: bool,
    pub y_coef: f64,
    pub y_offset: f64,
}

impl PlanarMap {
    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let xin = if self.x_abs { x.abs() } else { x };
        (
            self.x_coef * xin + self.x_offset,
            self.y_coef * y + self.y_offset,
        )
    }
}

/// `amplitude * trig^2(|x| + |y|) + base` on the edge's initial part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrigProbability {
    pub amplitude: f64,
    pub base: f64,
    pub trig: Trig,
}

impl TrigProbability {
    fn eval(&self, x: f64, y: f64) -> f64 {
        let norm = x.abs() + y.abs();
        let t = match self.trig {
            Trig::Sin => norm.sin(),
            Trig::Cos => norm.cos(),
        };
        self.amplitude * t * t + self.base
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanarParams {
    /// `K_1 = {y >= threshold}`, `K_2 = {y <= -threshold}`.
    pub threshold: f64,
    pub maps: [PlanarMap; 4],
    pub probabilities: [TrigProbability; 4],
    pub initial: [usize; 4],
    pub terminal: [usize; 4],
}

impl Default for PlanarParams {
    fn default() -> Self {
        let map = |x_coef, x_offset, x_abs, y_coef, y_offset| PlanarMap {
            x_coef,
            x_offset,
            x_abs,
            y_coef,
            y_offset,
        };
        let sin = TrigProbability {
            amplitude: 1.0 / 15.0,
            base: 53.0 / 105.0,
            trig: Trig::Sin,
        };
        let cos = TrigProbability {
            amplitude: 1.0 / 15.0,
            base: 3.0 / 7.0,
            trig: Trig::Cos,
        };
        Self {
            threshold: 0.5,
            maps: [
                map(-0.5, -1.0, false, -1.5, 0.25),
                map(-1.5, 1.0, false, 0.25, 0.375),
                map(-0.5, 1.0, true, -1.5, -0.25),
                map(1.5, -1.0, true, -0.25, 0.375),
            ],
            probabilities: [sin, cos, sin, cos],
            initial: [1, 1, 2, 2],
            // w_1 sends K_1 into K_2; the other three land in K_1
            terminal: [2, 1, 1, 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap1d {
    pub slope: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BernoulliParams {
    pub interval: [f64; 2],
    pub maps: Vec<AffineMap1d>,
    pub probabilities: Vec<f64>,
}

impl Default for BernoulliParams {
    fn default() -> Self {
        Self {
            interval: [0.0, 1.0],
            maps: vec![
                AffineMap1d {
                    slope: 0.5,
                    offset: 0.0,
                },
                AffineMap1d {
                    slope: 0.5,
                    offset: 0.5,
                },
            ],
            probabilities: vec![0.5, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiniteChainParams {
    /// Row-stochastic transition matrix; one edge per nonzero entry.
    pub matrix: Vec<Vec<f64>>,
}

impl Default for FiniteChainParams {
    fn default() -> Self {
        Self {
            matrix: vec![vec![0.9, 0.1], vec![0.5, 0.5]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    PlanarAffineTrig(PlanarParams),
    FiniteChain(FiniteChainParams),
    BernoulliIfs(BernoulliParams),
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::PlanarAffineTrig(_) => "planar_affine_trig",
            Family::FiniteChain(_) => "finite_chain",
            Family::BernoulliIfs(_) => "bernoulli_ifs",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Family::PlanarAffineTrig(_) => 2,
            Family::FiniteChain(_) => 0,
            Family::BernoulliIfs(_) => 1,
        }
    }
}

/// Analytic constants attached to a system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificates {
    /// Lower bound on `p_e` over `K_{i(e)}`.
    pub delta: f64,
    /// Average contraction rate `a`.
    pub declared_rate: f64,
    /// Lipschitz constant of every `p_e` on its part (Lipschitz implies Dini).
    pub lipschitz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSystem {
    graph: DirectedMultigraph,
    family: Family,
    metric: Metric,
    certificates: Certificates,
}

impl MarkovSystem {
    /// Builds a system with explicit certificates.
    pub fn new(family: Family, certificates: Certificates) -> Result<Self> {
        let (graph, metric) = build_graph(&family)?;
        let system = Self {
            graph,
            family,
            metric,
            certificates,
        };
        system.check_invariants()?;
        Ok(system)
    }

    /// Builds a system with the family's default certificates.
    pub fn with_default_certificates(family: Family) -> Result<Self> {
        let certificates = default_certificates(&family)?;
        Self::new(family, certificates)
    }

    pub fn planar_affine_trig() -> Self {
        Self::with_default_certificates(Family::PlanarAffineTrig(PlanarParams::default()))
            .expect("built-in planar system is valid")
    }

    pub fn finite_chain(matrix: Vec<Vec<f64>>) -> Result<Self> {
        Self::with_default_certificates(Family::FiniteChain(FiniteChainParams { matrix }))
    }

    pub fn bernoulli_ifs(params: BernoulliParams) -> Result<Self> {
        Self::with_default_certificates(Family::BernoulliIfs(params))
    }

    fn check_invariants(&self) -> Result<()> {
        let c = &self.certificates;
        if !(c.declared_rate > 0.0 && c.declared_rate < 1.0) {
            return input_err(format!("declared_rate {} not in (0, 1)", c.declared_rate));
        }
        let max_deg = self.graph.max_out_degree() as f64;
        if !(c.delta > 0.0 && c.delta <= 1.0 / max_deg + 1e-15) {
            return input_err(format!(
                "delta {} must lie in (0, 1/max out-degree = {}]",
                c.delta,
                1.0 / max_deg
            ));
        }
        if !c.lipschitz.is_finite() || c.lipschitz < 0.0 {
            return input_err("lipschitz certificate must be a finite nonnegative number");
        }
        if !self.graph.structure_flags().i_surjective {
            return input_err("every vertex needs at least one out-edge");
        }
        Ok(())
    }

    pub fn graph(&self) -> &DirectedMultigraph {
        &self.graph
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn certificates(&self) -> &Certificates {
        &self.certificates
    }

    pub fn delta(&self) -> f64 {
        self.certificates.delta
    }

    pub fn declared_rate(&self) -> f64 {
        self.certificates.declared_rate
    }

    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    pub fn vertex_count(&self) -> usize {
        self.graph.vertex_count()
    }

    pub fn edge_count(&self) -> usize {
        self.graph.edge_count()
    }

    pub fn distance(&self, a: &State, b: &State) -> f64 {
        self.metric.distance(a, b)
    }

    /// The part containing `coords`, or `None` when it lies in no part.
    ///
    /// For the finite chain family the coordinates are empty and every vertex
    /// is its own part, so this returns `None`; use [`contains`](Self::contains)
    /// for discrete states.
    pub fn part_index(&self, coords: &[f64]) -> Result<Option<usize>> {
        if coords.len() != self.dim() {
            return input_err(format!(
                "expected {} coordinates for {}, got {}",
                self.dim(),
                self.family.name(),
                coords.len()
            ));
        }
        Ok(match &self.family {
            Family::PlanarAffineTrig(p) => {
                let y = coords[1];
                if y >= p.threshold {
                    Some(1)
                } else if y <= -p.threshold {
                    Some(2)
                } else {
                    None
                }
            }
            Family::BernoulliIfs(b) => {
                (b.interval[0] <= coords[0] && coords[0] <= b.interval[1]).then_some(1)
            }
            Family::FiniteChain(_) => None,
        })
    }

    /// True iff `state` lies in the part `K_{state.vertex}`.
    pub fn contains(&self, state: &State) -> bool {
        if state.dim() != self.dim() || state.vertex == 0 || state.vertex > self.vertex_count() {
            return false;
        }
        match self.family {
            Family::FiniteChain(_) => true,
            _ => {
                state.coords().iter().all(|c| c.is_finite())
                    && self.part_index(state.coords()).ok().flatten() == Some(state.vertex)
            }
        }
    }

    /// `w_e(state)` tagged with `t(e)`, without any membership checks.
    pub fn map_index(&self, edge: usize, state: &State) -> State {
        let terminal = self.graph.edge(edge).terminal;
        match &self.family {
            Family::PlanarAffineTrig(p) => {
                let (x, y) = p.maps[edge].apply(state.coords[0], state.coords[1]);
                State::planar(terminal, x, y)
            }
            Family::FiniteChain(_) => State::discrete(terminal),
            Family::BernoulliIfs(b) => {
                let m = b.maps[edge];
                State::line(terminal, m.slope * state.coords[0] + m.offset)
            }
        }
    }

    /// `w_e(state)`, checking `state in K_{i(e)}` and `w_e(state) in K_{t(e)}`.
    pub fn apply_map(&self, edge: EdgeId, state: &State) -> Result<State> {
        let k = self.graph.index_of(edge)?;
        let e = self.graph.edge(k);
        if state.vertex != e.initial || !self.contains(state) {
            return Err(CmsError::Precondition(format!(
                "state {:?} is not in K_{} (initial part of edge {edge})",
                state, e.initial
            )));
        }
        let image = self.map_index(k, state);
        if !self.contains(&image) {
            return Err(CmsError::Integrity(format!(
                "w_{edge} maps {:?} to {:?}, outside K_{}",
                state.coords(),
                image.coords(),
                e.terminal
            )));
        }
        Ok(image)
    }

    /// `p_e(state)` for the edge at index `edge`; zero off `K_{i(e)}`.
    pub fn edge_probability(&self, edge: usize, state: &State) -> f64 {
        let e = self.graph.edge(edge);
        if e.initial != state.vertex {
            return 0.0;
        }
        match &self.family {
            Family::PlanarAffineTrig(p) => {
                p.probabilities[edge].eval(state.coords[0], state.coords[1])
            }
            Family::FiniteChain(f) => f.matrix[e.initial - 1][e.terminal - 1],
            Family::BernoulliIfs(b) => b.probabilities[edge],
        }
    }

    /// Writes `p_e(state)` for every edge index into `out`.
    pub fn probabilities_into(&self, state: &State, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.edge_count());
        out.fill(0.0);
        if state.vertex == 0 || state.vertex > self.vertex_count() {
            return;
        }
        for &k in self.graph.out_edges(state.vertex) {
            out[k] = self.edge_probability(k, state);
        }
    }

    pub fn probability_vector(&self, state: &State) -> BTreeMap<EdgeId, f64> {
        let mut p = vec![0.0; self.edge_count()];
        self.probabilities_into(state, &mut p);
        self.graph
            .edges()
            .iter()
            .zip(p)
            .map(|(e, p)| (e.id, p))
            .collect()
    }

    /// Sampler covering every part; `radius` bounds the planar windows.
    pub fn default_sampler(&self, radius: f64) -> WindowSampler<'_> {
        WindowSampler {
            system: self,
            radius,
        }
    }
}

fn build_graph(family: &Family) -> Result<(DirectedMultigraph, Metric)> {
    match family {
        Family::PlanarAffineTrig(p) => {
            if !(p.threshold > 0.0) {
                return input_err("planar threshold must be positive");
            }
            let edges = (0..4)
                .map(|k| Edge {
                    id: EdgeId(k as u32 + 1),
                    initial: p.initial[k],
                    terminal: p.terminal[k],
                })
                .collect();
            let all_finite = p.maps.iter().all(|m| {
                [m.x_coef, m.x_offset, m.y_coef, m.y_offset]
                    .iter()
                    .all(|v| v.is_finite())
            }) && p
                .probabilities
                .iter()
                .all(|q| q.amplitude.is_finite() && q.base.is_finite());
            if !all_finite {
                return input_err("planar parameters must be finite");
            }
            Ok((DirectedMultigraph::new(2, edges)?, Metric::L1))
        }
        Family::FiniteChain(f) => {
            let n = f.matrix.len();
            if n == 0 {
                return input_err("transition matrix is empty");
            }
            let mut pairs = Vec::new();
            for (i, row) in f.matrix.iter().enumerate() {
                if row.len() != n {
                    return input_err(format!(
                        "transition matrix row {} has {} entries, expected {n}",
                        i + 1,
                        row.len()
                    ));
                }
                if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return input_err(format!("row {} has an entry outside [0, 1]", i + 1));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return input_err(format!("row {} sums to {sum}, not 1", i + 1));
                }
                for (j, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        pairs.push((i + 1, j + 1));
                    }
                }
            }
            Ok((DirectedMultigraph::from_pairs(n, &pairs)?, Metric::Discrete))
        }
        Family::BernoulliIfs(b) => {
            if b.maps.is_empty() || b.maps.len() != b.probabilities.len() {
                return input_err("bernoulli_ifs needs one probability per map");
            }
            if !(b.interval[0] < b.interval[1]) {
                return input_err("bernoulli_ifs interval must be nondegenerate");
            }
            if b.probabilities.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
                return input_err("bernoulli_ifs probabilities must lie in (0, 1]");
            }
            let sum: f64 = b.probabilities.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return input_err(format!("bernoulli_ifs probabilities sum to {sum}, not 1"));
            }
            let pairs = vec![(1, 1); b.maps.len()];
            Ok((DirectedMultigraph::from_pairs(1, &pairs)?, Metric::L1))
        }
    }
}

fn default_certificates(family: &Family) -> Result<Certificates> {
    Ok(match family {
        Family::PlanarAffineTrig(p) => Certificates {
            delta: p
                .probabilities
                .iter()
                .map(|q| q.base + q.amplitude.min(0.0))
                .fold(f64::INFINITY, f64::min),
            declared_rate: planar_rate_bound(p),
            lipschitz: p
                .probabilities
                .iter()
                .map(|q| q.amplitude.abs())
                .fold(0.0, f64::max),
        },
        Family::FiniteChain(f) => Certificates {
            delta: f
                .matrix
                .iter()
                .flatten()
                .copied()
                .filter(|&p| p > 0.0)
                .fold(f64::INFINITY, f64::min),
            // images of any pair coincide, so any rate in (0, 1) is valid
            declared_rate: 0.5,
            lipschitz: 0.0,
        },
        Family::BernoulliIfs(b) => {
            let rate: f64 = b
                .maps
                .iter()
                .zip(&b.probabilities)
                .map(|(m, p)| p * m.slope.abs())
                .sum();
            if rate >= 1.0 {
                return input_err(format!(
                    "bernoulli_ifs average slope {rate} is not a contraction"
                ));
            }
            Certificates {
                delta: b
                    .probabilities
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min),
                declared_rate: rate.max(f64::MIN_POSITIVE),
                lipschitz: 0.0,
            }
        }
    })
}

/// Coefficient bound on the average contraction ratio of a planar system.
///
/// For `x, y` in the same part, `d(w_e x, w_e y) <= |a_e| |dx| + |c_e| |dy|`,
/// so the ratio is at most the larger of the probability-weighted `|a_e|` and
/// `|c_e|` sums. Each weighted sum is affine in `sin^2`, so its maximum over
/// the part is attained at `sin^2 = 0` or `sin^2 = 1`. For the default
/// parameters this gives `max(3/2 - p_1, 1/4 + 5 p_1 / 4) <= 209/210`.
pub fn planar_rate_bound(p: &PlanarParams) -> f64 {
    let mut bound: f64 = 0.0;
    for part in [1usize, 2] {
        for s2 in [0.0, 1.0] {
            let mut sx = 0.0;
            let mut sy = 0.0;
            for k in (0..4).filter(|&k| p.initial[k] == part) {
                let q = p.probabilities[k];
                let t2 = match q.trig {
                    Trig::Sin => s2,
                    Trig::Cos => 1.0 - s2,
                };
                let pk = q.amplitude * t2 + q.base;
                sx += pk * p.maps[k].x_coef.abs();
                sy += pk * p.maps[k].y_coef.abs();
            }
            bound = bound.max(sx).max(sy);
        }
    }
    bound
}

/// Draws states from a given part.
pub trait StateSampler: Sync {
    fn sample<R: Rng + ?Sized>(&self, vertex: usize, rng: &mut R) -> State;
}

/// Uniform sampler on bounded windows of each part: `[-R, R] x [1/2, R]` and
/// `[-R, R] x [-R, -1/2]` for the planar family, the whole interval for
/// `bernoulli_ifs`, and the single point for `finite_chain`.
#[derive(Debug, Clone, Copy)]
pub struct WindowSampler<'a> {
    system: &'a MarkovSystem,
    radius: f64,
}

impl StateSampler for WindowSampler<'_> {
    fn sample<R: Rng + ?Sized>(&self, vertex: usize, rng: &mut R) -> State {
        match self.system.family() {
            Family::PlanarAffineTrig(p) => {
                let r = self.radius.max(p.threshold);
                let x = rng.random_range(-r..=r);
                let y = rng.random_range(p.threshold..=r);
                State::planar(vertex, x, if vertex == 1 { y } else { -y })
            }
            Family::BernoulliIfs(b) => {
                State::line(vertex, rng.random_range(b.interval[0]..=b.interval[1]))
            }
            Family::FiniteChain(_) => State::discrete(vertex),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples_used: u64,
    pub normalization_max_error: f64,
    pub support_violations: u64,
    pub image_containment_violations: u64,
    pub delta_violations: u64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct ValidationTally {
    samples: u64,
    norm_err: f64,
    support: u64,
    image: u64,
    delta: u64,
}

impl ValidationTally {
    fn merge(self, o: Self) -> Self {
        Self {
            samples: self.samples + o.samples,
            norm_err: self.norm_err.max(o.norm_err),
            support: self.support + o.support,
            image: self.image + o.image,
            delta: self.delta + o.delta,
        }
    }
}

/// Samples `n` states from `K_{i(e)}` for every edge `e` and counts failures
/// of image containment, normalization, support and the `delta` bound.
pub fn check_image_containment<S: StateSampler>(
    system: &MarkovSystem,
    sampler: &S,
    n: u64,
    tolerance: f64,
    seed: u64,
) -> Result<ValidationReport> {
    if n == 0 {
        return input_err("need at least one sample per edge");
    }
    let edge_count = system.edge_count();
    let chunks_per_edge = n.div_ceil(CHUNK as u64);
    let jobs: Vec<(usize, u64)> = (0..edge_count)
        .flat_map(|e| (0..chunks_per_edge).map(move |c| (e, c)))
        .collect();
    let tally = jobs
        .par_iter()
        .map(|&(edge, chunk)| {
            let mut rng = rng::stream(
                seed,
                purpose::VALIDATION,
                (edge as u64) * chunks_per_edge + chunk,
            );
            let count = (n - chunk * CHUNK as u64).min(CHUNK as u64);
            let e = *system.graph().edge(edge);
            let mut p = vec![0.0; edge_count];
            let mut t = ValidationTally::default();
            for _ in 0..count {
                let x = sampler.sample(e.initial, &mut rng);
                if !system.contains(&x) {
                    return input_err(format!("sampler produced invalid state {x:?}"));
                }
                t.samples += 1;
                system.probabilities_into(&x, &mut p);
                let sum: f64 = p.iter().sum();
                t.norm_err = t.norm_err.max((sum - 1.0).abs());
                for (k, &pk) in p.iter().enumerate() {
                    let ek = system.graph().edge(k);
                    if ek.initial != x.vertex {
                        if pk != 0.0 {
                            t.support += 1;
                        }
                    } else if !(pk >= system.delta()) || pk < 0.0 {
                        t.delta += 1;
                    }
                }
                if !system.contains(&system.map_index(edge, &x)) {
                    t.image += 1;
                }
            }
            Ok(t)
        })
        .try_reduce(ValidationTally::default, |a, b| Ok(a.merge(b)))?;
    Ok(ValidationReport {
        samples_used: tally.samples,
        normalization_max_error: tally.norm_err,
        support_violations: tally.support,
        image_containment_violations: tally.image,
        delta_violations: tally.delta,
        tolerance,
        passed: tally.support == 0
            && tally.image == 0
            && tally.delta == 0
            && tally.norm_err <= tolerance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub pairs_sampled: u64,
    pub pairs_skipped: u64,
    pub max_ratio: f64,
    pub mean_ratio: f64,
    pub mean_ratio_std_error: f64,
    pub declared_rate: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `sum_e p_e(x) d(w_e x, w_e y) / d(x, y)`, or `None` when `d(x, y) = 0`.
pub fn contraction_ratio(system: &MarkovSystem, x: &State, y: &State) -> Option<f64> {
    let d = system.distance(x, y);
    if d == 0.0 {
        return None;
    }
    let num: f64 = system
        .graph()
        .out_edges(x.vertex)
        .iter()
        .map(|&k| {
            system.edge_probability(k, x)
                * system.distance(&system.map_index(k, x), &system.map_index(k, y))
        })
        .sum();
    Some(num / d)
}

pub const CONTRACTION_TOLERANCE: f64 = 1e-9;

/// Empirical average-contraction ratios over `n_pairs` pairs drawn from the
/// same part (parts visited round-robin).
pub fn estimate_contraction_rate<S: StateSampler>(
    system: &MarkovSystem,
    sampler: &S,
    n_pairs: u64,
    seed: u64,
) -> ContractionReport {
    let chunks = n_pairs.div_ceil(CHUNK as u64);
    let parts = system.vertex_count() as u64;
    let (count, skipped, max, sum, sum_sq) = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = rng::stream(seed, purpose::CONTRACTION, chunk);
            let start = chunk * CHUNK as u64;
            let end = (start + CHUNK as u64).min(n_pairs);
            let mut acc = (0u64, 0u64, 0.0f64, 0.0f64, 0.0f64);
            for k in start..end {
                let vertex = (k % parts) as usize + 1;
                let x = sampler.sample(vertex, &mut rng);
                let y = sampler.sample(vertex, &mut rng);
                match contraction_ratio(system, &x, &y) {
                    Some(r) => {
                        acc.0 += 1;
                        acc.2 = acc.2.max(r);
                        acc.3 += r;
                        acc.4 += r * r;
                    }
                    None => acc.1 += 1,
                }
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0, 0, 0.0f64, 0.0, 0.0), |a, b| {
            (a.0 + b.0, a.1 + b.1, a.2.max(b.2), a.3 + b.3, a.4 + b.4)
        });
    let n = count as f64;
    let mean = if count > 0 { sum / n } else { 0.0 };
    let mean_se = if count > 1 {
        ((sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    let declared_rate = system.declared_rate();
    ContractionReport {
        pairs_sampled: count,
        pairs_skipped: skipped,
        max_ratio: max,
        mean_ratio: mean,
        mean_ratio_std_error: mean_se,
        declared_rate,
        tolerance: CONTRACTION_TOLERANCE,
        passed: max <= declared_rate + CONTRACTION_TOLERANCE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planar() -> MarkovSystem {
        MarkovSystem::planar_affine_trig()
    }

    #[test]
    fn planar_certificates() {
        let s = planar();
        assert!((s.delta() - 3.0 / 7.0).abs() < 1e-15);
        assert!((s.declared_rate() - 209.0 / 210.0).abs() < 1e-15);
        assert!((s.certificates().lipschitz - 1.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn part_index_examples() {
        let s = planar();
        assert_eq!(s.part_index(&[0.0, 1.0]).unwrap(), Some(1));
        assert_eq!(s.part_index(&[0.0, -1.0]).unwrap(), Some(2));
        assert_eq!(s.part_index(&[0.0, 0.0]).unwrap(), None);
        assert_eq!(s.part_index(&[0.0, 0.5]).unwrap(), Some(1));
        assert!(matches!(s.part_index(&[0.0]), Err(CmsError::Input(_))));
    }

    #[test]
    fn apply_map_examples() {
        let s = planar();
        let x = State::planar(1, 0.0, 1.0);
        assert_eq!(
            s.apply_map(EdgeId(1), &x).unwrap(),
            State::planar(2, -1.0, -1.25)
        );
        assert_eq!(
            s.apply_map(EdgeId(2), &x).unwrap(),
            State::planar(1, 1.0, 0.625)
        );
        assert!(matches!(
            s.apply_map(EdgeId(3), &x),
            Err(CmsError::Precondition(_))
        ));

        let chain = MarkovSystem::finite_chain(vec![vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        assert_eq!(
            chain.apply_map(EdgeId(2), &State::discrete(1)).unwrap(),
            State::discrete(2)
        );
    }

    #[test]
    fn broken_map_is_integrity_error() {
        let mut p = PlanarParams::default();
        p.maps[1].y_offset = 0.0;
        let s = MarkovSystem::with_default_certificates(Family::PlanarAffineTrig(p)).unwrap();
        let err = s
            .apply_map(EdgeId(2), &State::planar(1, 0.0, 1.0))
            .unwrap_err();
        assert!(matches!(err, CmsError::Integrity(_)));
    }

    #[test]
    fn probability_examples() {
        let s = planar();
        let p = s.probability_vector(&State::planar(1, 0.0, 1.0));
        let s1 = 1f64.sin().powi(2) / 15.0 + 53.0 / 105.0;
        let c1 = 1f64.cos().powi(2) / 15.0 + 3.0 / 7.0;
        assert!((p[&EdgeId(1)] - s1).abs() < 1e-15);
        assert!((p[&EdgeId(1)] - 0.551967).abs() < 1e-6);
        assert!((p[&EdgeId(2)] - c1).abs() < 1e-15);
        assert!((p[&EdgeId(2)] - 0.448033).abs() < 1e-6);
        assert_eq!(p[&EdgeId(3)], 0.0);
        assert_eq!(p[&EdgeId(4)], 0.0);

        let b = MarkovSystem::bernoulli_ifs(BernoulliParams::default()).unwrap();
        let p = b.probability_vector(&State::line(1, 0.3));
        assert_eq!(p.values().copied().collect::<Vec<_>>(), vec![0.5, 0.5]);
    }

    #[test]
    fn finite_chain_edges_are_row_major() {
        let s = MarkovSystem::finite_chain(vec![vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        let pairs: Vec<_> = s
            .graph()
            .edges()
            .iter()
            .map(|e| (e.initial, e.terminal))
            .collect();
        assert_eq!(pairs, vec![(1, 1), (1, 2), (2, 1), (2, 2)]);
        assert_eq!(s.delta(), 0.1);
        let zero = MarkovSystem::finite_chain(vec![vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        assert_eq!(zero.edge_count(), 3);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(MarkovSystem::finite_chain(vec![vec![0.9, 0.2], vec![0.5, 0.5]]).is_err());
        assert!(MarkovSystem::finite_chain(vec![vec![1.0], vec![1.0]]).is_err());
        assert!(MarkovSystem::finite_chain(vec![vec![1.0, 0.0], vec![1.0, 0.0]]).is_ok());
        let cert = Certificates {
            delta: 0.6,
            declared_rate: 0.5,
            lipschitz: 0.0,
        };
        assert!(MarkovSystem::new(Family::BernoulliIfs(BernoulliParams::default()), cert).is_err());
        let cert = Certificates {
            delta: 0.5,
            declared_rate: 1.0,
            lipschitz: 0.0,
        };
        assert!(MarkovSystem::new(Family::BernoulliIfs(BernoulliParams::default()), cert).is_err());
        let expanding = BernoulliParams {
            maps: vec![AffineMap1d {
                slope: 1.0,
                offset: 0.0,
            }],
            probabilities: vec![1.0],
            ..Default::default()
        };
        assert!(MarkovSystem::bernoulli_ifs(expanding).is_err());
    }

    #[test]
    fn validation_planar_passes() {
        let s = planar();
        let r = check_image_containment(&s, &s.default_sampler(8.0), 10_000, 1e-12, 1).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.samples_used, 40_000);
    }

    #[test]
    fn validation_detects_broken_map() {
        let mut p = PlanarParams::default();
        p.maps[1].y_offset = 0.0;
        let s = MarkovSystem::with_default_certificates(Family::PlanarAffineTrig(p)).unwrap();
        let r = check_image_containment(&s, &s.default_sampler(8.0), 10_000, 1e-12, 1).unwrap();
        assert!(!r.passed);
        assert!(r.image_containment_violations > 0);
    }

    #[test]
    fn validation_finite_chain() {
        let s = MarkovSystem::finite_chain(vec![vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        let r = check_image_containment(&s, &s.default_sampler(8.0), 100, 1e-12, 1).unwrap();
        assert!(r.passed);
        assert_eq!(r.image_containment_violations, 0);
    }

    #[test]
    fn contraction_single_pair() {
        let s = planar();
        let r = contraction_ratio(&s, &State::planar(1, 0.0, 1.0), &State::planar(1, 0.0, 2.0))
            .unwrap();
        let p1 = 1f64.sin().powi(2) / 15.0 + 53.0 / 105.0;
        assert!((r - (1.5 * p1 + 0.25 * (1.0 - p1))).abs() < 1e-14);
        assert!((r - 0.939959).abs() < 1e-6);
        assert_eq!(
            contraction_ratio(&s, &State::planar(1, 0.0, 1.0), &State::planar(1, 0.0, 1.0)),
            None
        );
    }

    #[test]
    fn contraction_planar_below_declared() {
        let s = planar();
        let r = estimate_contraction_rate(&s, &s.default_sampler(8.0), 20_000, 3);
        assert!(r.passed, "{r:?}");
        assert!(r.max_ratio > 0.9);
    }

    #[test]
    fn contraction_finite_chain_is_zero() {
        let s = MarkovSystem::finite_chain(vec![vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        let r = estimate_contraction_rate(&s, &s.default_sampler(8.0), 100, 3);
        assert_eq!(r.max_ratio, 0.0);
        assert_eq!(r.pairs_skipped, 100);
        assert!(r.passed);
    }

    #[test]
    fn state_serde_round_trip() {
        let s = State::planar(2, 0.25, -3.0);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"vertex":2,"coords":[0.25,-3.0]}"#);
        assert_eq!(serde_json::from_str::<State>(&json).unwrap(), s);
    }
}
