//! The Markov process of a system: simulation, invariant-measure estimation
//! and iterates of the Markov operator `Uf = sum_e p_e * f o w_e`.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, CmsError, Result};
use crate::graph::EdgeId;
use crate::rng::{self, purpose, CHUNK};
use crate::stats::{compensated_sum, weighted_mean, Estimate};
use crate::system::{MarkovSystem, State};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub edge: EdgeId,
    pub state: State,
}

/// A chain realization `x_0, (e_1, x_1), (e_2, x_2), ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial: State,
    pub steps: Vec<Step>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn symbols(&self) -> Vec<EdgeId> {
        self.steps.iter().map(|s| s.edge).collect()
    }

    /// Exact check of `i(e_1) = vertex(x_0)`, `i(e_{k+1}) = t(e_k)` and
    /// `x_k = w_{e_k}(x_{k-1})` at every index.
    pub fn satisfies_path_condition(&self, system: &MarkovSystem) -> bool {
        let g = system.graph();
        let mut prev = self.initial;
        for s in &self.steps {
            let Ok(k) = g.index_of(s.edge) else {
                return false;
            };
            if g.edge(k).initial != prev.vertex || system.map_index(k, &prev) != s.state {
                return false;
            }
            prev = s.state;
        }
        true
    }

    /// Writes the edge-id stream, whitespace separated.
    pub fn write_symbols<W: Write>(&self, out: W) -> Result<()> {
        write_symbols(&self.symbols(), out)
    }
}

/// Whitespace-separated edge ids, 32 per line.
pub fn write_symbols<W: Write>(symbols: &[EdgeId], mut out: W) -> Result<()> {
    let mut line = String::new();
    for (k, e) in symbols.iter().enumerate() {
        if k > 0 {
            line.push(if k % 32 == 0 { '\n' } else { ' ' });
        }
        line.push_str(&e.0.to_string());
    }
    line.push('\n');
    out.write_all(line.as_bytes())?;
    Ok(())
}

pub fn read_symbols<R: Read>(mut input: R) -> Result<Vec<EdgeId>> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<u32>()
                .map(EdgeId)
                .map_err(|_| CmsError::Input(format!("bad edge id {tok:?} in symbol stream")))
        })
        .collect()
}

/// One transition driven by the uniform draw `u in [0, 1)`: the edge is
/// chosen by inverse CDF over the out-edges of `state` in id order.
/// Returns the edge index and the new state.
pub fn step_with_uniform(system: &MarkovSystem, state: &State, u: f64) -> Result<(usize, State)> {
    if !system.contains(state) {
        return Err(CmsError::Input(format!("state {state:?} lies in no part")));
    }
    let out = system.graph().out_edges(state.vertex);
    let mut cumulative = 0.0;
    let mut chosen = None;
    for &k in out {
        let p = system.edge_probability(k, state);
        if p > 0.0 {
            cumulative += p;
            chosen = Some(k);
            if u < cumulative {
                break;
            }
        }
    }
    // falls through to the last positive edge when rounding leaves the sum below u
    let k = chosen.ok_or_else(|| {
        CmsError::Integrity(format!("no edge with positive probability at {state:?}"))
    })?;
    Ok((k, system.map_index(k, state)))
}

pub fn step<R: Rng + ?Sized>(
    system: &MarkovSystem,
    state: &State,
    rng: &mut R,
) -> Result<(EdgeId, State)> {
    let (k, next) = step_with_uniform(system, state, rng.random::<f64>())?;
    Ok((system.graph().edge(k).id, next))
}

/// Runs `n` steps from `x0`; identical arguments give identical trajectories.
pub fn simulate(system: &MarkovSystem, x0: State, n: usize, seed: u64) -> Result<Trajectory> {
    simulate_stream(system, x0, n, seed, purpose::CHAIN)
}

pub(crate) fn simulate_stream(
    system: &MarkovSystem,
    x0: State,
    n: usize,
    seed: u64,
    stream_purpose: u64,
) -> Result<Trajectory> {
    if n == 0 {
        return input_err("trajectory length must be at least 1");
    }
    let mut rng = rng::stream(seed, stream_purpose, 0);
    let mut steps = Vec::with_capacity(n);
    let mut x = x0;
    for _ in 0..n {
        let (edge, next) = step(system, &x, &mut rng)?;
        steps.push(Step { edge, state: next });
        x = next;
    }
    Ok(Trajectory {
        initial: x0,
        steps,
        seed,
    })
}

/// Edge-id stream of a trajectory after discarding `burn_in` steps.
pub fn symbol_stream(
    system: &MarkovSystem,
    x0: State,
    burn_in: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<EdgeId>> {
    symbol_stream_with(system, x0, burn_in, n, seed, purpose::SYMBOLS)
}

pub(crate) fn symbol_stream_with(
    system: &MarkovSystem,
    x0: State,
    burn_in: usize,
    n: usize,
    seed: u64,
    stream_purpose: u64,
) -> Result<Vec<EdgeId>> {
    if !system.contains(&x0) {
        return input_err(format!("initial state {x0:?} lies in no part"));
    }
    let mut rng = rng::stream(seed, stream_purpose, 0);
    let mut x = x0;
    let mut out = Vec::with_capacity(n);
    for k in 0..burn_in + n {
        let (edge, next) = step(system, &x, &mut rng)?;
        if k >= burn_in {
            out.push(edge);
        }
        x = next;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    LongRun,
    Ensemble,
    Pushforward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Source,
    pub burn_in: u64,
    pub thinning: u64,
    pub seed: u64,
    /// Windows or samples discarded while building the measure.
    #[serde(default)]
    pub dropped: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub state: State,
    pub weight: f64,
}

/// Weighted particle approximation of a probability measure on `K`.
///
/// Particles keep the order in which they were generated so that standard
/// errors can account for serial correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    pub particles: Vec<Particle>,
    pub provenance: Provenance,
}

impl EmpiricalMeasure {
    pub fn equal_weight(states: Vec<State>, provenance: Provenance) -> Result<Self> {
        if states.is_empty() {
            return input_err("empirical measure needs at least one particle");
        }
        let w = 1.0 / states.len() as f64;
        Ok(Self {
            particles: states
                .into_iter()
                .map(|state| Particle { state, weight: w })
                .collect(),
            provenance,
        })
    }

    /// Normalizes positive weights to total mass 1.
    pub fn weighted(mut particles: Vec<Particle>, provenance: Provenance) -> Result<Self> {
        if particles.is_empty() {
            return input_err("empirical measure needs at least one particle");
        }
        if particles
            .iter()
            .any(|p| !(p.weight > 0.0) || !p.weight.is_finite())
        {
            return input_err("particle weights must be positive and finite");
        }
        let total = compensated_sum(particles.iter().map(|p| p.weight));
        for p in &mut particles {
            p.weight /= total;
        }
        Ok(Self {
            particles,
            provenance,
        })
    }

    /// Concatenates measures (each weighted by its particle count) and
    /// renormalizes.
    pub fn merge(parts: Vec<EmpiricalMeasure>, provenance: Provenance) -> Result<Self> {
        let particles = parts
            .into_iter()
            .flat_map(|m| {
                let n = m.particles.len() as f64;
                m.particles.into_iter().map(move |p| Particle {
                    state: p.state,
                    weight: p.weight * n,
                })
            })
            .collect();
        Self::weighted(particles, provenance)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        compensated_sum(self.particles.iter().map(|p| p.weight))
    }

    pub fn states(&self) -> impl Iterator<Item = &State> {
        self.particles.iter().map(|p| &p.state)
    }

    /// Checks that every particle lies in a part of `system`.
    pub fn validate(&self, system: &MarkovSystem) -> Result<()> {
        if (self.total_weight() - 1.0).abs() > 1e-12 {
            return input_err(format!("weights sum to {}", self.total_weight()));
        }
        match self.particles.iter().find(|p| !system.contains(&p.state)) {
            Some(p) => input_err(format!("particle {:?} lies in no part", p.state)),
            None => Ok(()),
        }
    }

    /// `integral f d(self)` with a standard error.
    pub fn integrate<F: Fn(&State) -> f64 + Sync>(&self, f: F) -> Estimate {
        let values: Vec<f64> = self.particles.par_iter().map(|p| f(&p.state)).collect();
        let weights: Vec<f64> = self.particles.iter().map(|p| p.weight).collect();
        // particles are stored in generation order; ESS covers serial correlation
        weighted_mean(&values, &weights, true)
    }

    /// `self(K_i)` for `i = 1..=vertex_count`.
    pub fn part_masses(&self, vertex_count: usize) -> Vec<Estimate> {
        (1..=vertex_count)
            .map(|v| self.integrate(|s| if s.vertex == v { 1.0 } else { 0.0 }))
            .collect()
    }

    /// CSV with columns `vertex, coord_1..coord_d, weight`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let dim = self.particles.first().map_or(0, |p| p.state.dim());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["vertex".to_string()];
        header.extend((1..=dim).map(|k| format!("coord_{k}")));
        header.push("weight".into());
        w.write_record(&header)?;
        for p in &self.particles {
            let mut row = vec![p.state.vertex.to_string()];
            row.extend(p.state.coords().iter().map(|c| format!("{c:?}")));
            row.push(format!("{:?}", p.weight));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, provenance: Provenance) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut particles = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| CmsError::Input(format!("row {}: bad number {s:?}", line + 2)))
            };
            if rec.len() < 2 {
                return input_err(format!("row {}: too few columns", line + 2));
            }
            let vertex = rec[0]
                .trim()
                .parse::<usize>()
                .map_err(|_| CmsError::Input(format!("row {}: bad vertex", line + 2)))?;
            let coords = (1..rec.len() - 1)
                .map(|k| parse(&rec[k]))
                .collect::<Result<Vec<_>>>()?;
            let weight = parse(&rec[rec.len() - 1])?;
            particles.push(Particle {
                state: State::new(vertex, &coords)?,
                weight,
            });
        }
        Self::weighted(particles, provenance)
    }

    pub fn write_provenance<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.provenance)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub burn_in: u64,
    pub n_samples: u64,
    pub thinning: u64,
    pub initial_state: State,
    pub seed: u64,
}

impl ChainConfig {
    pub fn new(initial_state: State, seed: u64) -> Self {
        Self {
            burn_in: 10_000,
            n_samples: 100_000,
            thinning: 1,
            initial_state,
            seed,
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_samples == 0 {
            return input_err("n_samples must be at least 1");
        }
        if self.thinning == 0 {
            return input_err("thinning must be at least 1");
        }
        Ok(())
    }
}

/// Long-run estimate of the invariant measure: equal-weight particles from
/// one trajectory after `burn_in` steps, keeping every `thinning`-th state.
pub fn estimate_invariant_measure(
    system: &MarkovSystem,
    config: &ChainConfig,
) -> Result<EmpiricalMeasure> {
    run_chain(system, config, 0, Source::LongRun)
}

/// Runs `chains` independent chains in parallel, each producing
/// `n_samples / chains` particles, and merges them.
pub fn estimate_invariant_measure_ensemble(
    system: &MarkovSystem,
    config: &ChainConfig,
    chains: u64,
) -> Result<EmpiricalMeasure> {
    config.check()?;
    if chains == 0 || chains > config.n_samples {
        return input_err("chain count must lie in 1..=n_samples");
    }
    let per = config.n_samples / chains;
    let parts = (0..chains)
        .into_par_iter()
        .map(|c| {
            let cfg = ChainConfig {
                n_samples: per + u64::from(c < config.n_samples % chains),
                ..*config
            };
            run_chain(system, &cfg, c + 1, Source::Ensemble)
        })
        .collect::<Result<Vec<_>>>()?;
    EmpiricalMeasure::merge(
        parts,
        Provenance {
            source: Source::Ensemble,
            burn_in: config.burn_in,
            thinning: config.thinning,
            seed: config.seed,
            dropped: 0,
        },
    )
}

fn run_chain(
    system: &MarkovSystem,
    config: &ChainConfig,
    stream_index: u64,
    source: Source,
) -> Result<EmpiricalMeasure> {
    config.check()?;
    if !system.contains(&config.initial_state) {
        return input_err(format!(
            "initial state {:?} lies in no part",
            config.initial_state
        ));
    }
    let mut rng = rng::stream(config.seed, purpose::CHAIN, stream_index);
    let mut x = config.initial_state;
    for _ in 0..config.burn_in {
        x = step(system, &x, &mut rng)?.1;
    }
    let mut states = Vec::with_capacity(config.n_samples as usize);
    for _ in 0..config.n_samples {
        for _ in 0..config.thinning {
            x = step(system, &x, &mut rng)?.1;
        }
        states.push(x);
    }
    EmpiricalMeasure::equal_weight(
        states,
        Provenance {
            source,
            burn_in: config.burn_in,
            thinning: config.thinning,
            seed: config.seed,
            dropped: 0,
        },
    )
}

/// Moves every particle one step of the chain with fresh randomness: a
/// sample of `U* mu`.
pub fn push_one_step(
    system: &MarkovSystem,
    mu: &EmpiricalMeasure,
    seed: u64,
) -> Result<EmpiricalMeasure> {
    let particles = mu
        .particles
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut rng = rng::stream(seed, purpose::PUSH, c as u64);
            chunk
                .iter()
                .map(|p| {
                    Ok(Particle {
                        state: step(system, &p.state, &mut rng)?.1,
                        weight: p.weight,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    Ok(EmpiricalMeasure {
        particles,
        provenance: mu.provenance,
    })
}

/// `sum_i integral_{K_i} d(x, x_i) d mu(x)` for anchors `x_i in K_i`.
pub fn first_moment(
    system: &MarkovSystem,
    mu: &EmpiricalMeasure,
    anchors: &[State],
) -> Result<Estimate> {
    check_anchors(system, anchors)?;
    Ok(mu.integrate(|s| system.distance(s, &anchors[s.vertex - 1])))
}

pub(crate) fn check_anchors(system: &MarkovSystem, anchors: &[State]) -> Result<()> {
    if anchors.len() != system.vertex_count() {
        return input_err(format!(
            "need one anchor per vertex ({}), got {}",
            system.vertex_count(),
            anchors.len()
        ));
    }
    for (i, a) in anchors.iter().enumerate() {
        if a.vertex != i + 1 || !system.contains(a) {
            return input_err(format!("anchor {:?} does not lie in K_{}", a, i + 1));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorConfig {
    /// Depth up to which the branching tree is always evaluated exactly.
    pub exact_depth: usize,
    /// Beyond `exact_depth`, exact evaluation continues while the merged
    /// frontier stays below this many nodes.
    pub frontier_cap: usize,
    /// Monte Carlo paths used once the tree is collapsed.
    pub mc_paths: usize,
    pub seed: u64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            exact_depth: 12,
            frontier_cap: 4096,
            mc_paths: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorValue {
    pub estimate: Estimate,
    pub exact: bool,
    /// Depth at which the tree was collapsed to Monte Carlo, if it was.
    pub collapsed_at: Option<usize>,
}

fn state_key(s: &State) -> (usize, u64, u64) {
    let c = s.coords();
    (
        s.vertex,
        c.first().map_or(0, |v| v.to_bits()),
        c.get(1).map_or(0, |v| v.to_bits()),
    )
}

/// `U^n f(x)`, by propagating the weighted branching tree (merging identical
/// states) and switching to Monte Carlo path sampling once the tree grows past
/// both `exact_depth` and `frontier_cap`.
pub fn operator_iterate<F: Fn(&State) -> f64 + Sync>(
    system: &MarkovSystem,
    f: F,
    x: &State,
    n: usize,
    config: &OperatorConfig,
) -> Result<OperatorValue> {
    if !system.contains(x) {
        return input_err(format!("state {x:?} lies in no part"));
    }
    let mut frontier: Vec<(State, f64)> = vec![(*x, 1.0)];
    for depth in 0..n {
        let mut next: Vec<(State, f64)> = Vec::new();
        let mut index: HashMap<(usize, u64, u64), usize> = HashMap::new();
        for (s, w) in &frontier {
            for &k in system.graph().out_edges(s.vertex) {
                let p = system.edge_probability(k, s);
                if p == 0.0 {
                    continue;
                }
                let image = system.map_index(k, s);
                match index.entry(state_key(&image)) {
                    std::collections::hash_map::Entry::Occupied(o) => next[*o.get()].1 += w * p,
                    std::collections::hash_map::Entry::Vacant(v) => {
                        v.insert(next.len());
                        next.push((image, w * p));
                    }
                }
            }
        }
        if depth + 1 > config.exact_depth && next.len() > config.frontier_cap {
            return Ok(OperatorValue {
                estimate: monte_carlo_tail(system, &f, &frontier, n - depth, config)?,
                exact: false,
                collapsed_at: Some(depth),
            });
        }
        frontier = next;
    }
    let value = frontier.iter().map(|(s, w)| w * f(s)).sum();
    Ok(OperatorValue {
        estimate: Estimate::exact(value),
        exact: true,
        collapsed_at: None,
    })
}

fn monte_carlo_tail<F: Fn(&State) -> f64 + Sync>(
    system: &MarkovSystem,
    f: &F,
    frontier: &[(State, f64)],
    remaining: usize,
    config: &OperatorConfig,
) -> Result<Estimate> {
    let paths = config.mc_paths.max(2);
    let mut cdf = Vec::with_capacity(frontier.len());
    let mut acc = 0.0;
    for (_, w) in frontier {
        acc += w;
        cdf.push(acc);
    }
    let chunks = paths.div_ceil(CHUNK);
    let values = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(config.seed, purpose::OPERATOR, c as u64);
            let count = (paths - c * CHUNK).min(CHUNK);
            (0..count)
                .map(|_| {
                    let u = rng.random::<f64>() * acc;
                    let j = cdf.partition_point(|&v| v <= u).min(frontier.len() - 1);
                    let mut s = frontier[j].0;
                    for _ in 0..remaining {
                        s = step(system, &s, &mut rng)?.1;
                    }
                    Ok(f(&s))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    let weights = vec![1.0 / values.len() as f64; values.len()];
    Ok(weighted_mean(&values, &weights, false))
}
