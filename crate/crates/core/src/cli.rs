//! Command dispatch: one [`RunConfig`] in, one [`Report`] plus side files out.

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::chain::{
    estimate_invariant_measure, estimate_invariant_measure_ensemble, first_moment, push_one_step,
    symbol_stream_with, write_symbols, ChainConfig, EmpiricalMeasure,
};
use crate::coding::{increment_decay, measure_distance, pushforward_measure, CodingConfig};
use crate::config::RunConfig;
use crate::entropy::{block_entropy, entropy_formula, entropy_rate_empirical, BlockEntropy};
use crate::error::{CmsError, Result};
use crate::graph::EdgeId;
use crate::measure::{
    conditional_test, single_edge_words, ConditionalTestConfig, ConditionalTestReport,
};
use crate::report::{
    nums, BlockRow, CodingResults, ContractionResults, EntropyResults, InvariantResults,
    Lemma2Results, Num, Report, Results, Timing, ValidateResults, Verdict, Versions,
    SCHEMA_VERSION,
};
use crate::rng::purpose;
use crate::stats::combined_se;
use crate::system::{check_image_containment, estimate_contraction_rate, MarkovSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Validate,
    Contraction,
    Invariant,
    Entropy,
    Coding,
    Lemma2,
    Report,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Validate,
        Command::Contraction,
        Command::Invariant,
        Command::Entropy,
        Command::Coding,
        Command::Lemma2,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Contraction => "contraction",
            Command::Invariant => "invariant",
            Command::Entropy => "entropy",
            Command::Coding => "coding",
            Command::Lemma2 => "lemma2",
            Command::Report => "report",
        }
    }

    fn includes(self, section: Command) -> bool {
        self == section || self == Command::Report
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = CmsError;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CmsError::Input(format!("unknown command `{s}`")))
    }
}

/// Bulky outputs written next to the report.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub measure: Option<EmpiricalMeasure>,
    pub pushforward: Option<EmpiricalMeasure>,
    pub blocks: Option<BlockEntropy>,
    pub symbols: Option<Vec<EdgeId>>,
    pub lemma2: Option<ConditionalTestReport>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub report: Report,
    pub artifacts: Artifacts,
}

impl RunOutput {
    /// Writes `report.json` and whichever side files the command produced.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let create = |name: &str| -> Result<BufWriter<File>> {
            Ok(BufWriter::new(File::create(dir.join(name))?))
        };
        std::fs::write(
            dir.join("report.json"),
            self.report.to_json_pretty()? + "\n",
        )?;
        let a = &self.artifacts;
        if let Some(mu) = &a.measure {
            mu.write_csv(create("measure.csv")?)?;
            mu.write_provenance(create("measure_provenance.json")?)?;
        }
        if let Some(pf) = &a.pushforward {
            pf.write_csv(create("pushforward.csv")?)?;
            pf.write_provenance(create("pushforward_provenance.json")?)?;
        }
        if let Some(b) = &a.blocks {
            b.write_csv(create("blocks.csv")?)?;
        }
        if let Some(s) = &a.symbols {
            write_symbols(s, create("symbols.txt")?)?;
        }
        if let Some(r) = &a.lemma2 {
            r.write_bins_csv(create("lemma2_bins.csv")?)?;
        }
        Ok(())
    }
}

/// Runs `command`. Input problems are errors; failed checks are reported
/// through [`Verdict`]. When the system fails validation, only the
/// validation section is produced.
pub fn run(config: &RunConfig, command: Command) -> Result<RunOutput> {
    let system = config.build_system()?;
    let mut resolved = config.clone();
    resolved.resolve(&system);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.effective_workers()?.unwrap_or(0))
        .build()
        .map_err(|e| CmsError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| Runner::new(&system, resolved).run(command))
}

struct Runner<'a> {
    system: &'a MarkovSystem,
    config: RunConfig,
    results: Results,
    artifacts: Artifacts,
    failures: Vec<String>,
    timing: Timing,
}

impl<'a> Runner<'a> {
    fn new(system: &'a MarkovSystem, config: RunConfig) -> Self {
        Self {
            system,
            config,
            results: Results::default(),
            artifacts: Artifacts::default(),
            failures: Vec::new(),
            timing: Timing::default(),
        }
    }

    fn run(mut self, command: Command) -> Result<RunOutput> {
        let start = Instant::now();
        let valid = self.timed(Command::Validate, Self::validate)?;
        let mut diagnostic = None;
        if !valid && command != Command::Validate {
            diagnostic =
                Some("system failed validation; dependent commands were not run".to_string());
        } else {
            for section in [
                Command::Contraction,
                Command::Invariant,
                Command::Entropy,
                Command::Coding,
                Command::Lemma2,
            ] {
                if command.includes(section) {
                    let f = match section {
                        Command::Contraction => Self::contraction,
                        Command::Invariant => Self::invariant,
                        Command::Entropy => Self::entropy,
                        Command::Coding => Self::coding,
                        _ => Self::lemma2,
                    };
                    self.timed(section, f)?;
                }
            }
        }
        self.timing
            .seconds
            .insert("total".into(), start.elapsed().as_secs_f64());
        let report = Report {
            schema_version: SCHEMA_VERSION,
            command: command.name().into(),
            config: self.config,
            results: self.results,
            verdict: Verdict {
                passed: self.failures.is_empty(),
                failures: self.failures,
                diagnostic,
            },
            timing: self.timing,
            versions: Versions::default(),
        };
        Ok(RunOutput {
            report,
            artifacts: self.artifacts,
        })
    }

    fn timed(&mut self, section: Command, f: fn(&mut Self) -> Result<bool>) -> Result<bool> {
        let t = Instant::now();
        let passed = f(self)?;
        self.timing
            .seconds
            .insert(section.name().into(), t.elapsed().as_secs_f64());
        if !passed {
            self.failures.push(section.name().into());
        }
        Ok(passed)
    }

    fn validate(&mut self) -> Result<bool> {
        let s = self.system;
        let v = &self.config.validate;
        let r = check_image_containment(
            s,
            &s.default_sampler(v.radius),
            v.samples,
            v.tolerance,
            self.config.seed,
        )?;
        let c = s.certificates();
        self.results.validate = Some(ValidateResults {
            family: s.family().name().into(),
            vertex_count: s.vertex_count(),
            edge_count: s.edge_count(),
            structure: s.graph().structure_flags(),
            period: s.graph().period(),
            delta: Num::exact(c.delta),
            declared_rate: Num::exact(c.declared_rate),
            lipschitz: Num::exact(c.lipschitz),
            samples_per_edge: v.samples,
            samples_used: r.samples_used,
            normalization_max_error: Num::exact(r.normalization_max_error),
            support_violations: r.support_violations,
            image_containment_violations: r.image_containment_violations,
            delta_violations: r.delta_violations,
            tolerance: Num::exact(r.tolerance),
            passed: r.passed,
        });
        Ok(r.passed)
    }

    fn contraction(&mut self) -> Result<bool> {
        let s = self.system;
        let c = &self.config.contraction;
        let r =
            estimate_contraction_rate(s, &s.default_sampler(c.radius), c.pairs, self.config.seed);
        self.results.contraction = Some(ContractionResults {
            pairs_sampled: r.pairs_sampled,
            pairs_skipped: r.pairs_skipped,
            max_ratio: Num::exact(r.max_ratio),
            mean_ratio: Num::estimate(r.mean_ratio, r.mean_ratio_std_error),
            declared_rate: Num::exact(r.declared_rate),
            tolerance: Num::exact(r.tolerance),
            passed: r.passed,
        });
        Ok(r.passed)
    }

    fn measure(&mut self) -> Result<&EmpiricalMeasure> {
        if self.artifacts.measure.is_none() {
            let c = &self.config.chain;
            let cfg = ChainConfig {
                burn_in: c.burn_in,
                n_samples: c.n_samples,
                thinning: c.thinning,
                initial_state: self.initial_state(),
                seed: self.config.seed,
            };
            let mu = if c.chains <= 1 {
                estimate_invariant_measure(self.system, &cfg)?
            } else {
                estimate_invariant_measure_ensemble(self.system, &cfg, c.chains)?
            };
            self.artifacts.measure = Some(mu);
        }
        Ok(self.artifacts.measure.as_ref().expect("measure just set"))
    }

    fn initial_state(&self) -> crate::State {
        self.config
            .chain
            .initial_state
            .expect("resolved config has an initial state")
    }

    fn anchors(&self) -> &[crate::State] {
        self.config
            .coding
            .anchors
            .as_deref()
            .expect("resolved config has anchors")
    }

    fn stream(&self, burn_in: usize, n: usize, stream_purpose: u64) -> Result<Vec<EdgeId>> {
        symbol_stream_with(
            self.system,
            self.initial_state(),
            burn_in,
            n,
            self.config.seed,
            stream_purpose,
        )
    }

    fn invariant(&mut self) -> Result<bool> {
        let s = self.system;
        let seed = self.config.seed;
        let mu = self.measure()?.clone();
        let n = s.vertex_count();
        let masses = mu.part_masses(n);
        let pushed = push_one_step(s, &mu, seed)?.part_masses(n);
        let z = masses
            .iter()
            .zip(&pushed)
            .map(|(a, b)| {
                let gap = (a.value - b.value).abs();
                if gap == 0.0 {
                    0.0
                } else {
                    gap / combined_se(a.std_error, b.std_error)
                }
            })
            .fold(0.0, f64::max);
        let anchors = self.anchors().to_vec();
        let moment = first_moment(s, &mu, &anchors)?;
        let passed = z <= 3.0;
        self.results.invariant = Some(InvariantResults {
            particles: mu.len(),
            provenance: mu.provenance,
            part_masses: nums(&masses),
            anchors,
            first_moment: moment.into(),
            pushed_part_masses: nums(&pushed),
            push_max_z: Num::exact(z),
            passed,
        });
        Ok(passed)
    }

    fn entropy(&mut self) -> Result<bool> {
        let s = self.system;
        let e = self.config.entropy.clone();
        let units = self.config.units;
        let mu = self.measure()?.clone();
        let formula = entropy_formula(s, &mu);
        let symbols = self.stream(e.burn_in, e.stream_length, purpose::SYMBOLS)?;
        let block = entropy_rate_empirical(&symbols, e.n_max)?;
        let blocks = block_entropy(&symbols, e.n_max)?;
        let difference = (formula.value - block.value).abs();
        let threshold = e.k * combined_se(formula.std_error, block.std_error) + e.bias_allowance;
        let passed = difference <= threshold;
        let f = formula.in_units(units);
        let b = block.in_units(units);
        let moment = first_moment(s, &mu, self.anchors())?;
        self.results.entropy = Some(EntropyResults {
            units,
            formula: Num::estimate(f.value, f.std_error),
            formula_particles: f.n_samples,
            block_rate: Num::estimate(b.value, b.std_error),
            block_rate_corrected: Num::exact(b.corrected.unwrap_or(b.value)),
            n_max: e.n_max,
            stream_length: symbols.len(),
            blocks: (1..=e.n_max)
                .map(|k| BlockRow {
                    k,
                    h: Num::exact(units.from_nats(blocks.h[k - 1])),
                    h_corrected: Num::exact(units.from_nats(blocks.h_corrected[k - 1])),
                })
                .collect(),
            first_moment: moment.into(),
            difference: Num::exact(units.from_nats(difference)),
            threshold: Num::exact(units.from_nats(threshold)),
            passed,
        });
        self.artifacts.blocks = Some(blocks);
        self.artifacts.symbols = Some(symbols);
        Ok(passed)
    }

    fn coding(&mut self) -> Result<bool> {
        let s = self.system;
        let c = self.config.coding.clone();
        let mu = self.measure()?.clone();
        let cfg = CodingConfig {
            anchors: self.anchors().to_vec(),
            tolerance: c.tolerance,
            max_window: c.max_window,
        };
        if c.n_points == 0 || c.stride == 0 || c.decay_windows == 0 {
            return Err(CmsError::Input(
                "coding n_points, stride and decay_windows must be positive".into(),
            ));
        }
        let windows = c.n_points.max(c.decay_windows);
        let symbols = self.stream(
            c.burn_in,
            c.max_window + (windows - 1) * c.stride,
            purpose::CODING_SOURCE,
        )?;
        let pf = pushforward_measure(s, &symbols, &cfg, c.n_points, c.stride)?;
        let decay = increment_decay(s, &symbols, &cfg, c.decay_windows, c.stride)?;
        let d = measure_distance(s, &mu, &pf.measure)?;
        let moment = first_moment(s, &mu, &cfg.anchors)?;
        let converged = 1.0 - pf.windows_dropped as f64 / pf.windows_attempted as f64;
        let decay_ok = decay
            .median_ratio
            .is_none_or(|r| r <= s.declared_rate() + 0.05);
        let passed = d.part_masses_agree(3.0) && converged >= 0.99 && decay_ok;
        self.results.coding = Some(CodingResults {
            window: c.max_window,
            stride: c.stride,
            windows_attempted: pf.windows_attempted,
            windows_dropped: pf.windows_dropped,
            median_window: pf.median_window,
            max_increment: Num::exact(pf.max_increment),
            tail_error_bound: Num::exact(pf.tail_error_bound),
            pushforward_part_masses: nums(&d.part_masses_b),
            invariant_part_masses: nums(&d.part_masses_a),
            part_mass_gap: Num::exact(d.part_mass_gap),
            max_z: Num::exact(d.max_part_z()),
            moment_gaps: d.moment_gaps.iter().copied().map(Num::exact).collect(),
            energy_distance: Num::exact(d.energy_distance),
            energy_particles: d.energy_particles,
            first_moment: moment.into(),
            decay_windows: decay.windows,
            decay_ratios: decay.ratios,
            decay_median_ratio: decay.median_ratio.map(Num::exact),
            converged_fraction: Num::exact(converged),
            passed,
        });
        self.artifacts.pushforward = Some(pf.measure);
        Ok(passed)
    }

    fn lemma2(&mut self) -> Result<bool> {
        let s = self.system;
        let l = self.config.lemma2.clone();
        let cfg = ConditionalTestConfig {
            past_length: l.past_length,
            n_windows: l.n_windows,
            stride: l.stride,
            bins_per_coord: l.bins_per_coord,
            min_per_bin: l.min_per_bin,
            tolerance: l.tolerance,
            binning: l.binning,
        };
        if l.n_windows == 0 || l.stride == 0 {
            return Err(CmsError::Input(
                "lemma2 n_windows and stride must be positive".into(),
            ));
        }
        let words = single_edge_words(s);
        let symbols = self.stream(
            l.burn_in,
            l.past_length + (l.n_windows - 1) * l.stride + 1,
            purpose::LEMMA2_SOURCE,
        )?;
        let coding = CodingConfig {
            anchors: self.anchors().to_vec(),
            tolerance: self.config.coding.tolerance,
            max_window: l.past_length,
        };
        let r = conditional_test(s, &symbols, &coding, &cfg, &words)?;
        self.results.lemma2 = Some(Lemma2Results {
            past_length: r.past_length,
            words: r.words_tested.clone(),
            binning: l.binning,
            n_windows: r.n_windows,
            windows_unconverged: r.windows_unconverged,
            windows_excluded: r.windows_excluded,
            bins_used: r.bins_used,
            bins_excluded: r.bins_excluded,
            max_abs_gap: Num::exact(r.max_abs_gap),
            max_z: Num::exact(r.max_z),
            total_variation_gap: Num::exact(r.total_variation_gap),
            tolerance: Num::exact(r.tolerance),
            passed: r.passed,
        });
        let passed = r.passed;
        self.artifacts.lemma2 = Some(r);
        Ok(passed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::Units;

    fn small(name: &str) -> RunConfig {
        let mut cfg = RunConfig::builtin(name, 5).unwrap();
        cfg.chain.n_samples = 20_000;
        cfg.chain.burn_in = 1_000;
        cfg.validate.samples = 2_000;
        cfg.contraction.pairs = 5_000;
        cfg.entropy.stream_length = 100_000;
        cfg.entropy.n_max = 3;
        cfg.coding.n_points = 1_000;
        cfg.coding.decay_windows = 100;
        cfg.lemma2.n_windows = 5_000;
        cfg.lemma2.bins_per_coord = 4;
        cfg
    }

    #[test]
    fn command_names_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!("simulate".parse::<Command>().is_err());
    }

    #[test]
    fn validate_only_runs_validation() {
        let out = run(&small("finite_chain"), Command::Validate).unwrap();
        let r = &out.report.results;
        assert!(r.validate.as_ref().unwrap().passed);
        assert!(r.contraction.is_none() && r.entropy.is_none());
        assert!(out.report.verdict.passed);
    }

    #[test]
    fn finite_chain_entropy_section() {
        let out = run(&small("finite_chain"), Command::Entropy).unwrap();
        let e = out.report.results.entropy.unwrap();
        assert!(e.passed, "{e:?}");
        assert_eq!(e.blocks.len(), 3);
        assert!(out.artifacts.symbols.is_some() && out.artifacts.measure.is_some());
    }

    #[test]
    fn bits_scale_every_entropy_number() {
        let mut cfg = small("bernoulli_ifs");
        let nats = run(&cfg, Command::Entropy)
            .unwrap()
            .report
            .results
            .entropy
            .unwrap();
        cfg.units = Units::Bits;
        let bits = run(&cfg, Command::Entropy)
            .unwrap()
            .report
            .results
            .entropy
            .unwrap();
        assert_eq!(bits.formula, Num::exact(1.0));
        let ln2 = std::f64::consts::LN_2;
        assert_eq!(bits.block_rate.value(), nats.block_rate.value() / ln2);
        assert_eq!(
            bits.block_rate.std_error(),
            nats.block_rate.std_error() / ln2
        );
        assert_eq!(bits.threshold.value(), nats.threshold.value() / ln2);
        assert_eq!(bits.blocks[1].h.value(), nats.blocks[1].h.value() / ln2);
        assert_eq!(bits.passed, nats.passed);
    }

    #[test]
    fn invalid_system_reports_only_validation() {
        let mut cfg = small("planar_affine_trig");
        if let crate::system::Family::PlanarAffineTrig(p) = &mut cfg.system {
            p.maps[1].y_offset = 0.0;
        }
        let out = run(&cfg, Command::Report).unwrap();
        let r = &out.report.results;
        let v = r.validate.as_ref().unwrap();
        assert!(!v.passed && v.image_containment_violations > 0);
        assert!(r.contraction.is_none() && r.invariant.is_none() && r.lemma2.is_none());
        assert!(!out.report.verdict.passed);
        assert!(out.report.verdict.diagnostic.is_some());
    }

    #[test]
    fn worker_count_does_not_change_payload() {
        let mut cfg = small("planar_affine_trig");
        cfg.workers = Some(1);
        let one = run(&cfg, Command::Report)
            .unwrap()
            .report
            .payload()
            .unwrap();
        cfg.workers = Some(3);
        let three = run(&cfg, Command::Report)
            .unwrap()
            .report
            .payload()
            .unwrap();
        assert_eq!(one, three);
    }

    #[test]
    fn side_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&small("finite_chain"), Command::Report).unwrap();
        out.write_to(dir.path()).unwrap();
        for f in [
            "report.json",
            "measure.csv",
            "measure_provenance.json",
            "pushforward.csv",
            "blocks.csv",
            "symbols.txt",
            "lemma2_bins.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }
}
