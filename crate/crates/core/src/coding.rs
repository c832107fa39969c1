//! The coding map `F` from pasts of the symbol stream to points of `K`.
//!
//! For a past `(sigma_m, ..., sigma_0)` the backward iterates are
//! `Y_m = w_{sigma_0} o ... o w_{sigma_m} (x_{i(sigma_m)})`, and `F` is their
//! limit as the window grows. `Y_0` is the anchor of the current part
//! `t(sigma_0)`. Iteration stops once successive iterates differ by at most the
//! configured tolerance; under average contraction with rate `a` the remaining
//! distance to the limit is then of order `a / (1 - a)` times that increment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{check_anchors, EmpiricalMeasure, Particle, Provenance, Source};
use crate::error::{input_err, Result};
use crate::graph::EdgeId;
use crate::stats::{combined_se, Estimate};
use crate::system::{Family, MarkovSystem, State};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodingConfig {
    /// One anchor `x_i in K_i` per vertex.
    pub anchors: Vec<State>,
    pub tolerance: f64,
    pub max_window: usize,
}

impl CodingConfig {
    pub fn new(system: &MarkovSystem, anchors: Vec<State>) -> Result<Self> {
        let config = Self {
            anchors,
            tolerance: 1e-10,
            max_window: 2000,
        };
        config.check(system)?;
        Ok(config)
    }

    /// Anchors on the boundary of each part (`(0, +-1/2)` for the planar
    /// family, the left end of the interval, the vertex itself for chains).
    pub fn default_for(system: &MarkovSystem) -> Self {
        Self {
            anchors: default_anchors(system),
            tolerance: 1e-10,
            max_window: 2000,
        }
    }

    pub fn check(&self, system: &MarkovSystem) -> Result<()> {
        check_anchors(system, &self.anchors)?;
        if !(self.tolerance > 0.0) {
            return input_err("coding tolerance must be positive");
        }
        if self.max_window == 0 {
            return input_err("max_window must be at least 1");
        }
        Ok(())
    }
}

pub fn default_anchors(system: &MarkovSystem) -> Vec<State> {
    match system.family() {
        Family::PlanarAffineTrig(p) => vec![
            State::planar(1, 0.0, p.threshold),
            State::planar(2, 0.0, -p.threshold),
        ],
        Family::BernoulliIfs(b) => vec![State::line(1, b.interval[0])],
        Family::FiniteChain(_) => (1..=system.vertex_count()).map(State::discrete).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodingResult {
    pub point: State,
    pub window_used: usize,
    /// `d(Y_m, Y_{m-1})` at the last window examined.
    pub last_increment: f64,
    pub converged: bool,
}

/// `Y_m` for the last `m` symbols of `past` (edge indices, oldest first).
fn backward_iterate(system: &MarkovSystem, past: &[usize], m: usize, anchors: &[State]) -> State {
    let g = system.graph();
    if m == 0 {
        let current = g.edge(past[past.len() - 1]).terminal;
        return anchors[current - 1];
    }
    let window = &past[past.len() - m..];
    let mut y = anchors[g.edge(window[0]).initial - 1];
    for &k in window {
        y = system.map_index(k, &y);
    }
    y
}

/// Next window length to examine; grows by roughly 1/16 per check so the
/// total work stays linear in the final window.
fn next_window(m: usize) -> usize {
    m + (m / 16).max(1)
}

/// Coding of a past given as edge indices, oldest first. The path condition
/// is assumed.
///
/// Reference points used to cross-check a coded point. They sit away from
/// the part boundaries and the symmetry axis so that they do not collide
/// with the anchors under the folding maps.
fn shadow_anchors(system: &MarkovSystem) -> Vec<State> {
    match system.family() {
        Family::PlanarAffineTrig(p) => vec![
            State::planar(1, SQRT2_FRAC, p.threshold + SQRT3_FRAC),
            State::planar(2, -SQRT3_FRAC, -p.threshold - SQRT2_FRAC),
        ],
        Family::BernoulliIfs(b) => vec![State::line(
            1,
            b.interval[0] + SQRT2_FRAC * (b.interval[1] - b.interval[0]),
        )],
        Family::FiniteChain(_) => default_anchors(system),
    }
}

const SQRT2_FRAC: f64 = std::f64::consts::SQRT_2 - 1.0;
const SQRT3_FRAC: f64 = 0.732_050_807_568_877_2;

/// A window is accepted when the increment `d(Y_m, Y_{m-1})` is at most the
/// tolerance and the iterate started from the shadow points lies within the
/// tolerance of `Y_m`. The second check rules out early stops where two
/// iterates collide by accident.
pub(crate) fn code_indices(
    system: &MarkovSystem,
    past: &[usize],
    config: &CodingConfig,
) -> CodingResult {
    let limit = past.len().min(config.max_window);
    let shadow = shadow_anchors(system);
    let mut m = 1;
    loop {
        let y = backward_iterate(system, past, m, &config.anchors);
        let prev = backward_iterate(system, past, m - 1, &config.anchors);
        let inc = system.distance(&y, &prev);
        let below = inc <= config.tolerance
            && system.distance(&y, &backward_iterate(system, past, m, &shadow)) <= config.tolerance;
        if below || m == limit {
            return CodingResult {
                point: y,
                window_used: m,
                last_increment: inc,
                converged: below,
            };
        }
        m = next_window(m).min(limit);
    }
}

pub(crate) fn past_indices(system: &MarkovSystem, past: &[EdgeId]) -> Result<Vec<usize>> {
    let g = system.graph();
    let idx = past
        .iter()
        .map(|&id| g.index_of(id))
        .collect::<Result<Vec<_>>>()?;
    if !g.is_index_path(&idx) {
        return input_err("past is not a path of the graph");
    }
    Ok(idx)
}

/// `F` of a past `(sigma_m, ..., sigma_0)` listed oldest first.
pub fn code_point(
    system: &MarkovSystem,
    past: &[EdgeId],
    config: &CodingConfig,
) -> Result<CodingResult> {
    if past.is_empty() {
        return input_err("past must contain at least one symbol");
    }
    config.check(system)?;
    let idx = past_indices(system, past)?;
    Ok(code_indices(system, &idx, config))
}

/// `d(Y_m, Y_{m-1})` for `m = 1..=m_max` (capped at the past length).
pub fn increment_profile(
    system: &MarkovSystem,
    past: &[EdgeId],
    anchors: &[State],
    m_max: usize,
) -> Result<Vec<f64>> {
    check_anchors(system, anchors)?;
    let idx = past_indices(system, past)?;
    let m_max = m_max.min(idx.len());
    let mut prev = backward_iterate(system, &idx, 0, anchors);
    Ok((1..=m_max)
        .map(|m| {
            let y = backward_iterate(system, &idx, m, anchors);
            let d = system.distance(&y, &prev);
            prev = y;
            d
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncrementDecay {
    pub windows: usize,
    /// Ratios pooled over all windows.
    pub ratios: usize,
    /// Median of `d(Y_m, Y_{m-1}) / d(Y_{m-1}, Y_{m-2})` up to each window's
    /// stopping point; `None` when no window has two nonzero increments.
    pub median_ratio: Option<f64>,
    pub converged_fraction: f64,
}

/// Successive-increment ratios over `n_windows` windows of length
/// `max_window` cut from `symbols` at the given stride.
pub fn increment_decay(
    system: &MarkovSystem,
    symbols: &[EdgeId],
    config: &CodingConfig,
    n_windows: usize,
    stride: usize,
) -> Result<IncrementDecay> {
    config.check(system)?;
    if n_windows == 0 || stride == 0 {
        return input_err("n_windows and stride must be positive");
    }
    let len = config.max_window;
    let needed = len + (n_windows - 1) * stride;
    if symbols.len() < needed {
        return input_err(format!(
            "symbol stream has {} symbols, need {needed}",
            symbols.len()
        ));
    }
    let idx = past_indices(system, &symbols[..needed])?;
    let per_window: Vec<(bool, Vec<f64>)> = (0..n_windows)
        .into_par_iter()
        .map(|j| {
            let past = &idx[j * stride..j * stride + len];
            let r = code_indices(system, past, config);
            let mut prev = backward_iterate(system, past, 0, &config.anchors);
            let mut last = 0.0;
            let mut ratios = Vec::new();
            for m in 1..=r.window_used {
                let y = backward_iterate(system, past, m, &config.anchors);
                let d = system.distance(&y, &prev);
                if m > 1 && last > 0.0 {
                    ratios.push(d / last);
                }
                last = d;
                prev = y;
            }
            (r.converged, ratios)
        })
        .collect();
    let converged = per_window.iter().filter(|w| w.0).count();
    let mut ratios: Vec<f64> = per_window.into_iter().flat_map(|w| w.1).collect();
    ratios.sort_by(f64::total_cmp);
    Ok(IncrementDecay {
        windows: n_windows,
        ratios: ratios.len(),
        median_ratio: ratios.get(ratios.len() / 2).copied(),
        converged_fraction: converged as f64 / n_windows as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pushforward {
    pub measure: EmpiricalMeasure,
    pub windows_attempted: u64,
    pub windows_dropped: u64,
    pub median_window: usize,
    pub max_increment: f64,
    /// `a / (1 - a) * tolerance`: bound on the distance from a converged
    /// iterate to the limit, up to the average-contraction constant.
    pub tail_error_bound: f64,
}

/// Codes `n_points` windows of length `max_window` from a stationary symbol
/// stream, window `j` ending after symbol `max_window + j * stride`, and
/// returns the equal-weight measure of the converged coded points.
pub fn pushforward_measure(
    system: &MarkovSystem,
    symbols: &[EdgeId],
    config: &CodingConfig,
    n_points: usize,
    stride: usize,
) -> Result<Pushforward> {
    config.check(system)?;
    if n_points == 0 || stride == 0 {
        return input_err("n_points and stride must be positive");
    }
    let needed = config.max_window + (n_points - 1) * stride;
    if symbols.len() < needed {
        return input_err(format!(
            "symbol stream has {} symbols, need {needed} for {n_points} windows of {} at stride {stride}",
            symbols.len(),
            config.max_window
        ));
    }
    let idx = past_indices(system, &symbols[..needed])?;
    let results: Vec<CodingResult> = (0..n_points)
        .into_par_iter()
        .map(|j| {
            let end = config.max_window + j * stride;
            code_indices(system, &idx[end - config.max_window..end], config)
        })
        .collect();
    let mut windows: Vec<usize> = results.iter().map(|r| r.window_used).collect();
    windows.sort_unstable();
    let max_increment = results
        .iter()
        .filter(|r| r.converged)
        .map(|r| r.last_increment)
        .fold(0.0, f64::max);
    let states: Vec<State> = results
        .iter()
        .filter(|r| r.converged)
        .map(|r| r.point)
        .collect();
    let dropped = (n_points - states.len()) as u64;
    if states.is_empty() {
        return input_err("no window converged; increase max_window or tolerance");
    }
    let measure = EmpiricalMeasure::equal_weight(
        states,
        Provenance {
            source: Source::Pushforward,
            burn_in: 0,
            thinning: stride as u64,
            seed: 0,
            dropped,
        },
    )?;
    let a = system.declared_rate();
    Ok(Pushforward {
        measure,
        windows_attempted: n_points as u64,
        windows_dropped: dropped,
        median_window: windows[windows.len() / 2],
        max_increment,
        tail_error_bound: a / (1.0 - a) * config.tolerance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureDistance {
    /// `max_i |a(K_i) - b(K_i)|`.
    pub part_mass_gap: f64,
    pub part_masses_a: Vec<Estimate>,
    pub part_masses_b: Vec<Estimate>,
    /// `|E_a x_j - E_b x_j|, |E_a x_j^2 - E_b x_j^2|` for each coordinate `j`.
    pub moment_gaps: Vec<f64>,
    /// `2 E d(X, Y) - E d(X, X') - E d(Y, Y')`.
    pub energy_distance: f64,
    /// Particles per side used for the energy statistic.
    pub energy_particles: usize,
}

impl MeasureDistance {
    /// True iff every part-mass gap is within `k` combined standard errors.
    pub fn part_masses_agree(&self, k: f64) -> bool {
        self.part_masses_a
            .iter()
            .zip(&self.part_masses_b)
            .all(|(a, b)| a.agrees_with(b, k))
    }

    /// Largest `|gap_i| / combined_se_i` (infinite when a nonzero gap has no error).
    pub fn max_part_z(&self) -> f64 {
        self.part_masses_a
            .iter()
            .zip(&self.part_masses_b)
            .map(|(a, b)| {
                let gap = (a.value - b.value).abs();
                let se = combined_se(a.std_error, b.std_error);
                if gap == 0.0 {
                    0.0
                } else {
                    gap / se
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Cap on particles per side in the quadratic-cost energy statistic.
pub const ENERGY_MAX_PARTICLES: usize = 2000;

pub fn measure_distance(
    system: &MarkovSystem,
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
) -> Result<MeasureDistance> {
    a.validate(system)?;
    b.validate(system)?;
    let n = system.vertex_count();
    let part_masses_a = a.part_masses(n);
    let part_masses_b = b.part_masses(n);
    let part_mass_gap = part_masses_a
        .iter()
        .zip(&part_masses_b)
        .map(|(x, y)| (x.value - y.value).abs())
        .fold(0.0, f64::max);
    let mut moment_gaps = Vec::new();
    for j in 0..system.dim() {
        for power in [1, 2] {
            let ma = a.integrate(|s| s.coords()[j].powi(power)).value;
            let mb = b.integrate(|s| s.coords()[j].powi(power)).value;
            moment_gaps.push((ma - mb).abs());
        }
    }
    let sa = thin(a, ENERGY_MAX_PARTICLES);
    let sb = thin(b, ENERGY_MAX_PARTICLES);
    let cross = mean_distance(system, &sa, &sb);
    let within_a = mean_distance(system, &sa, &sa);
    let within_b = mean_distance(system, &sb, &sb);
    Ok(MeasureDistance {
        part_mass_gap,
        part_masses_a,
        part_masses_b,
        moment_gaps,
        energy_distance: 2.0 * cross - within_a - within_b,
        energy_particles: sa.len().max(sb.len()),
    })
}

/// Every `k`-th particle so that at most `cap` remain, weights renormalized.
fn thin(m: &EmpiricalMeasure, cap: usize) -> Vec<Particle> {
    let stride = m.len().div_ceil(cap).max(1);
    let kept: Vec<Particle> = m.particles.iter().step_by(stride).copied().collect();
    let total: f64 = kept.iter().map(|p| p.weight).sum();
    kept.into_iter()
        .map(|p| Particle {
            weight: p.weight / total,
            ..p
        })
        .collect()
}

fn mean_distance(system: &MarkovSystem, a: &[Particle], b: &[Particle]) -> f64 {
    a.par_iter()
        .map(|p| {
            p.weight
                * b.iter()
                    .map(|q| q.weight * system.distance(&p.state, &q.state))
                    .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{estimate_invariant_measure, simulate, ChainConfig};
    use crate::system::BernoulliParams;

    fn two_state() -> MarkovSystem {
        MarkovSystem::finite_chain(vec![vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap()
    }

    #[test]
    fn finite_chain_codes_to_current_state() {
        let s = two_state();
        let cfg = CodingConfig::default_for(&s);
        for past in [vec![EdgeId(2)], vec![EdgeId(1), EdgeId(2), EdgeId(3)]] {
            let r = code_point(&s, &past, &cfg).unwrap();
            let last = s
                .graph()
                .edge(s.graph().index_of(*past.last().unwrap()).unwrap());
            assert_eq!(r.point, State::discrete(last.terminal));
            assert_eq!(r.window_used, 1);
            assert!(r.converged);
        }
    }

    #[test]
    fn bernoulli_increments_halve() {
        let b = MarkovSystem::bernoulli_ifs(BernoulliParams::default()).unwrap();
        let anchors = [State::line(1, 1.0)];
        let past = vec![EdgeId(1); 20];
        let inc = increment_profile(&b, &past, &anchors, 20).unwrap();
        for (m, d) in inc.iter().enumerate() {
            assert_eq!(*d, 0.5f64.powi(m as i32 + 1));
        }
        let cfg = CodingConfig::new(&b, anchors.to_vec()).unwrap();
        let r = code_point(&b, &vec![EdgeId(1); 60], &cfg).unwrap();
        assert!(r.converged);
        assert!(r.point.coords()[0] <= 1e-10);
        let short = code_point(&b, &past, &cfg).unwrap();
        assert!(!short.converged);
        assert_eq!(short.window_used, 20);
    }

    #[test]
    fn rejects_invalid_pasts() {
        let p = MarkovSystem::planar_affine_trig();
        let cfg = CodingConfig::default_for(&p);
        assert!(code_point(&p, &[EdgeId(1), EdgeId(1)], &cfg).is_err());
        assert!(code_point(&p, &[], &cfg).is_err());
        assert!(code_point(&p, &[EdgeId(7)], &cfg).is_err());
        let mut bad = cfg.clone();
        bad.anchors[0] = State::planar(1, 0.0, 0.0);
        assert!(code_point(&p, &[EdgeId(1)], &bad).is_err());
    }

    #[test]
    fn planar_windows_converge() {
        let p = MarkovSystem::planar_affine_trig();
        let t = simulate(&p, State::planar(1, 0.0, 1.0), 40_000, 5).unwrap();
        let sym = t.symbols();
        let cfg = CodingConfig {
            max_window: 400,
            ..CodingConfig::default_for(&p)
        };
        let converged = (0..200)
            .filter(|j| {
                let end = 1000 + j * 150;
                code_point(&p, &sym[end - 400..end], &cfg)
                    .unwrap()
                    .converged
            })
            .count();
        assert!(converged >= 198, "{converged}");
    }

    #[test]
    fn coded_point_tracks_the_chain() {
        // with the true initial condition far in the past, F(past) is close to x_n
        let p = MarkovSystem::planar_affine_trig();
        let t = simulate(&p, State::planar(1, 0.0, 1.0), 3000, 8).unwrap();
        let sym = t.symbols();
        let cfg = CodingConfig {
            max_window: 2000,
            ..CodingConfig::default_for(&p)
        };
        let r = code_point(&p, &sym[..2500], &cfg).unwrap();
        assert!(r.converged);
        assert!(p.distance(&r.point, &t.steps[2499].state) < 1e-8);
    }

    #[test]
    fn anchor_independence_and_shift_equivariance() {
        let p = MarkovSystem::planar_affine_trig();
        let t = simulate(&p, State::planar(2, 1.0, -1.0), 20_000, 6).unwrap();
        let sym = t.symbols();
        let cfg = CodingConfig {
            max_window: 400,
            ..CodingConfig::default_for(&p)
        };
        let other = CodingConfig {
            anchors: vec![State::planar(1, 3.0, 2.5), State::planar(2, -1.5, -4.0)],
            ..cfg.clone()
        };
        let mut gaps = Vec::new();
        let mut shifts = Vec::new();
        for end in (500..20_000).step_by(97) {
            let a = code_point(&p, &sym[end - 400..end], &cfg).unwrap();
            let b = code_point(&p, &sym[end - 400..end], &other).unwrap();
            if a.converged && b.converged {
                gaps.push(p.distance(&a.point, &b.point));
            }
            let next = code_point(&p, &sym[end - 399..end + 1], &cfg).unwrap();
            if a.converged && next.converged {
                let pushed = p.apply_map(sym[end], &a.point).unwrap();
                shifts.push(p.distance(&pushed, &next.point));
            }
        }
        for gaps in [&mut gaps, &mut shifts] {
            // increments are not monotone, so a small tail lands above 2 * tol
            gaps.sort_by(f64::total_cmp);
            assert!(gaps[gaps.len() / 2] <= 2.0 * cfg.tolerance, "{gaps:?}");
            assert!(gaps[gaps.len() * 9 / 10] <= 2.0 * cfg.tolerance, "{gaps:?}");
            assert!(gaps[gaps.len() - 1] <= 1e-7, "{gaps:?}");
        }
    }

    #[test]
    fn bernoulli_decay_ratio_is_one_half() {
        let b = MarkovSystem::bernoulli_ifs(BernoulliParams::default()).unwrap();
        let t = simulate(&b, State::line(1, 0.5), 5_000, 4).unwrap();
        // anchor 0.3: consecutive increments differ by 1/2 times 0.15/0.35, 1 or 0.35/0.15
        let cfg = CodingConfig {
            anchors: vec![State::line(1, 0.3)],
            tolerance: 1e-10,
            max_window: 60,
        };
        let d = increment_decay(&b, &t.symbols(), &cfg, 200, 7).unwrap();
        assert_eq!(d.converged_fraction, 1.0);
        assert!((d.median_ratio.unwrap() - 0.5).abs() < 1e-6, "{d:?}");
    }

    #[test]
    fn pushforward_length_checks() {
        let s = two_state();
        let t = simulate(&s, State::discrete(1), 100, 1).unwrap();
        let cfg = CodingConfig {
            max_window: 50,
            ..CodingConfig::default_for(&s)
        };
        assert!(pushforward_measure(&s, &t.symbols(), &cfg, 52, 1).is_err());
        let pf = pushforward_measure(&s, &t.symbols(), &cfg, 51, 1).unwrap();
        assert_eq!(pf.measure.len(), 51);
        assert_eq!(pf.windows_dropped, 0);
    }

    #[test]
    fn pushforward_finite_chain_matches_stationary() {
        let s = two_state();
        let t = simulate(&s, State::discrete(1), 60_000, 2).unwrap();
        let cfg = CodingConfig {
            max_window: 10,
            ..CodingConfig::default_for(&s)
        };
        let pf = pushforward_measure(&s, &t.symbols(), &cfg, 10_000, 5).unwrap();
        let m = pf.measure.part_masses(2);
        assert!(
            (m[0].value - 5.0 / 6.0).abs() <= 3.0 * m[0].std_error,
            "{m:?}"
        );
    }

    #[test]
    fn distance_examples() {
        let s = two_state();
        let mu = estimate_invariant_measure(&s, &ChainConfig::new(State::discrete(1), 4)).unwrap();
        let d = measure_distance(&s, &mu, &mu).unwrap();
        assert_eq!(d.part_mass_gap, 0.0);
        assert!(d.energy_distance.abs() < 1e-12);
        assert!(d.part_masses_agree(3.0));

        let exact = EmpiricalMeasure::weighted(
            vec![
                Particle {
                    state: State::discrete(1),
                    weight: 5.0,
                },
                Particle {
                    state: State::discrete(2),
                    weight: 1.0,
                },
            ],
            mu.provenance,
        )
        .unwrap();
        let d = measure_distance(&s, &exact, &mu).unwrap();
        let se = d.part_masses_b[0].std_error;
        assert!(d.part_mass_gap <= 3.0 * se, "{} vs {se}", d.part_mass_gap);

        let p = MarkovSystem::planar_affine_trig();
        let point = |x| {
            EmpiricalMeasure::equal_weight(vec![State::planar(1, x, 1.0)], mu.provenance).unwrap()
        };
        let d = measure_distance(&p, &point(0.0), &point(1.0)).unwrap();
        assert_eq!(d.energy_distance, 2.0);
        assert_eq!(d.moment_gaps, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(d.part_mass_gap, 0.0);

        let b = MarkovSystem::bernoulli_ifs(BernoulliParams::default()).unwrap();
        assert!(measure_distance(&b, &point(0.0), &point(1.0)).is_err());
    }
}
