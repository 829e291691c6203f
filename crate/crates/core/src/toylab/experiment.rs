use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    encode_dataset, fit_encoder, generate_dataset, reconstruction_metrics, tokenize_dataset, EncoderConfig,
    Reconstruction, SyntheticSpec,
};
use crate::entropy::{analyze, EntropyProfile, ProfileSummary, DEFAULT_CLIFF_THRESHOLD};
use crate::format::{save_codebook, save_corpus, write_atomic};
use crate::generation::{
    memorization_report, sample_corpus, CountModel, CountModelConfig, GuidancePolicy, MemorizationReport,
};
use crate::quantizer::{fit_codebook, FitConfig};
use crate::schedule::tstar_vcq;
use crate::{Codebook, Execution, Result, Schedule, TokenCorpus, VcqError};

/// Peak pixel value used for every PSNR in a report.
pub const PSNR_PEAK: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedSchedule {
    pub name: String,
    pub schedule: Schedule,
}

/// Codebook fitting parameters shared by every schedule; each codebook has
/// as many entries as its schedule's `k_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodebookFitting {
    pub epochs: usize,
    pub decay: f64,
    pub seed: u64,
}

impl Default for CodebookFitting {
    fn default() -> Self {
        let f = FitConfig::default();
        CodebookFitting { epochs: f.epochs, decay: f.decay, seed: f.seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { samples_per_class: 20, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: SyntheticSpec,
    #[serde(default)]
    pub encoder: EncoderConfig,
    pub schedules: Vec<NamedSchedule>,
    #[serde(default)]
    pub fitting: CodebookFitting,
    #[serde(default)]
    pub model: CountModelConfig,
    #[serde(default)]
    pub policy: GuidancePolicy,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default = "default_threshold")]
    pub cliff_threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_CLIFF_THRESHOLD
}

impl Default for ExperimentConfig {
    /// 10 classes of 200 images, 32×32 pixels, 4×4 patches (`L = 64`),
    /// `d = 8`, `Constant(256)` against `Cosine(2 → 256)`.
    fn default() -> Self {
        let length = 64;
        ExperimentConfig {
            dataset: SyntheticSpec::default(),
            encoder: EncoderConfig::default(),
            schedules: vec![
                NamedSchedule {
                    name: "constant".into(),
                    schedule: Schedule::constant(256, length).expect("valid"),
                },
                NamedSchedule {
                    name: "cosine".into(),
                    schedule: Schedule::cosine(2, 256, length).expect("valid"),
                },
            ],
            fitting: CodebookFitting::default(),
            model: CountModelConfig::default(),
            policy: GuidancePolicy::default(),
            generation: GenerationConfig::default(),
            cliff_threshold: DEFAULT_CLIFF_THRESHOLD,
        }
    }
}

impl ExperimentConfig {
    /// The same configuration with every seed replaced by `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.encoder.seed = seed;
        self.fitting.seed = seed;
        self.generation.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedules.is_empty() {
            return Err(VcqError::Config("no schedules to compare".into()));
        }
        let ps = self.encoder.patch_size;
        if ps == 0 || !self.dataset.image_size.is_multiple_of(ps) {
            return Err(VcqError::Config(format!(
                "image size {} is not a multiple of patch size {ps}",
                self.dataset.image_size
            )));
        }
        let length = (self.dataset.image_size / ps).pow(2);
        for (i, s) in self.schedules.iter().enumerate() {
            let ok = !s.name.is_empty()
                && s.name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
            if !ok {
                return Err(VcqError::Config(format!("schedule name {:?} is not file-name safe", s.name)));
            }
            if self.schedules[..i].iter().any(|o| o.name == s.name) {
                return Err(VcqError::Config(format!("duplicate schedule name {:?}", s.name)));
            }
            if s.schedule.length() != length {
                return Err(VcqError::Config(format!(
                    "schedule {:?} has length {} but images have {length} patches",
                    s.name,
                    s.schedule.length()
                )));
            }
        }
        if self.dataset.n_classes == 0 || self.dataset.n_per_class == 0 {
            return Err(VcqError::Config("dataset is empty".into()));
        }
        if self.cliff_threshold.is_nan() || self.cliff_threshold <= 0.0 {
            return Err(VcqError::Config(format!("cliff threshold must be positive, got {}", self.cliff_threshold)));
        }
        Ok(())
    }
}

/// Per-schedule numbers in the report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScheduleResult {
    pub name: String,
    pub schedule: Schedule,
    pub mean_codebook: f64,
    pub capacity_bits: f64,
    /// Analytic first position whose cumulative capacity reaches `log2 N`.
    pub tstar_vcq: usize,
    pub entropy: ProfileSummary,
    pub conditional_bits: Vec<f64>,
    pub remaining_budget: Vec<f64>,
    pub reconstruction: Reconstruction,
    pub memorization: MemorizationReport,
    pub n_generated: usize,
}

/// A variable schedule measured against a constant one on the same data.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub baseline: String,
    pub schedule: String,
    pub cliff_delta: i64,
    pub psnr_delta: f64,
    pub exact_match_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub psnr_peak: f64,
    pub config: ExperimentConfig,
    pub n_images: usize,
    pub length: usize,
    pub schedules: Vec<ScheduleResult>,
    pub comparisons: Vec<Comparison>,
}

impl ExperimentReport {
    pub fn result(&self, name: &str) -> Option<&ScheduleResult> {
        self.schedules.iter().find(|s| s.name == name)
    }
}

/// Artifacts of one schedule kept alongside the report.
#[derive(Clone, Debug)]
pub struct ScheduleOutcome {
    pub name: String,
    pub codebook: Codebook,
    pub corpus: TokenCorpus,
    pub profile: EntropyProfile,
    pub generated: TokenCorpus,
}

#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub outcomes: Vec<ScheduleOutcome>,
}

fn stage<T>(name: &str, schedule: &str, r: Result<T>) -> Result<T> {
    r.map_err(VcqError::in_stage(format!("{name} [{schedule}]")))
}

/// Runs the full pipeline once per schedule on one shared dataset and
/// encoder.
pub fn run_cliff_experiment(config: &ExperimentConfig, exec: Execution) -> Result<ExperimentRun> {
    config.validate()?;
    let images = generate_dataset(&config.dataset).map_err(VcqError::in_stage("dataset"))?;
    let encoder = fit_encoder(&images, &config.encoder).map_err(VcqError::in_stage("encoder"))?;
    let latents = encode_dataset(&images, &encoder, exec).map_err(VcqError::in_stage("encode"))?;
    let n = images.len() as u64;
    let classes: Vec<Option<u32>> = (0..config.dataset.n_classes as u32)
        .flat_map(|c| std::iter::repeat_n(Some(c), config.generation.samples_per_class))
        .collect();

    let mut results = Vec::new();
    let mut outcomes = Vec::new();
    for NamedSchedule { name, schedule } in &config.schedules {
        let fit = FitConfig {
            k_max: schedule.k_max() as usize,
            epochs: config.fitting.epochs,
            decay: config.fitting.decay,
            seed: config.fitting.seed,
        };
        let codebook = stage("fit", name, fit_codebook(&latents, schedule, encoder.dim(), &fit, exec))?;
        let corpus = stage("tokenize", name, tokenize_dataset(&images, &encoder, schedule, &codebook, exec))?;
        let profile = stage("analyze", name, analyze(&corpus, schedule, config.cliff_threshold, exec))?;
        let reconstruction =
            stage("reconstruct", name, reconstruction_metrics(&images, &corpus, &encoder, &codebook))?;
        let model = stage("model", name, CountModel::fit(&corpus, schedule, &config.model))?;
        let generated = if classes.is_empty() {
            None
        } else {
            Some(stage(
                "generate",
                name,
                sample_corpus(&model, &classes, &config.policy, config.generation.seed, exec),
            )?)
        };
        let memorization = match &generated {
            Some(g) => stage("memorization", name, memorization_report(g, &corpus))?,
            None => MemorizationReport { exact_match_rate: 0.0, mean_longest_prefix: 0.0 },
        };
        let sizes = schedule.sizes();
        results.push(ScheduleResult {
            name: name.clone(),
            schedule: schedule.clone(),
            mean_codebook: sizes.iter().map(|&k| k as f64).sum::<f64>() / sizes.len() as f64,
            capacity_bits: schedule.cumulative_capacity(schedule.length())?,
            tstar_vcq: tstar_vcq(schedule, n)?,
            entropy: profile.summary(),
            conditional_bits: profile.conditional_bits.clone(),
            remaining_budget: profile.remaining_budget.clone(),
            reconstruction,
            memorization,
            n_generated: classes.len(),
        });
        outcomes.push(ScheduleOutcome {
            name: name.clone(),
            codebook,
            corpus,
            profile,
            generated: generated.unwrap_or_else(|| {
                TokenCorpus::new(schedule.length(), schedule.k_max(), vec![0; schedule.length()], None)
                    .expect("placeholder corpus is valid")
            }),
        });
    }

    let mut comparisons = Vec::new();
    if let Some(base) = results.iter().find(|r| r.schedule.is_constant()) {
        for r in results.iter().filter(|r| !r.schedule.is_constant()) {
            comparisons.push(Comparison {
                baseline: base.name.clone(),
                schedule: r.name.clone(),
                cliff_delta: r.entropy.cliff_position as i64 - base.entropy.cliff_position as i64,
                psnr_delta: r.reconstruction.psnr - base.reconstruction.psnr,
                exact_match_delta: r.memorization.exact_match_rate - base.memorization.exact_match_rate,
            });
        }
    }

    Ok(ExperimentRun {
        report: ExperimentReport {
            psnr_peak: PSNR_PEAK,
            config: config.clone(),
            n_images: images.len(),
            length: config.schedules[0].schedule.length(),
            schedules: results,
            comparisons,
        },
        outcomes,
    })
}

/// Writes `report.json` plus, per schedule, `entropy_<name>.csv`,
/// `corpus_<name>.vcqt`, `codebook_<name>.vcqc` and `generated_<name>.vcqt`.
pub fn write_report(run: &ExperimentRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("report.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &run.report)?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    for o in &run.outcomes {
        write_atomic(&dir.join(format!("entropy_{}.csv", o.name)), |w| o.profile.write_csv(w))?;
        save_corpus(&dir.join(format!("corpus_{}.vcqt", o.name)), &o.corpus)?;
        save_codebook(&dir.join(format!("codebook_{}.vcqc", o.name)), &o.codebook)?;
        save_corpus(&dir.join(format!("generated_{}.vcqt", o.name)), &o.generated)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            dataset: SyntheticSpec { n_classes: 3, n_per_class: 12, image_size: 16, noise: 0.1, seed: 1 },
            schedules: vec![
                NamedSchedule { name: "constant".into(), schedule: Schedule::constant(32, 16).unwrap() },
                NamedSchedule { name: "cosine".into(), schedule: Schedule::cosine(2, 32, 16).unwrap() },
            ],
            fitting: CodebookFitting { epochs: 4, ..Default::default() },
            generation: GenerationConfig { samples_per_class: 4, seed: 1 },
            ..Default::default()
        }
    }

    #[test]
    fn config_json_roundtrip() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.schedules[1].schedule.sizes().len(), 64);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = tiny();
        c.schedules[1].name = "../x".into();
        assert!(matches!(c.validate(), Err(VcqError::Config(_))));
        let mut c = tiny();
        c.schedules[1].name = "constant".into();
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.schedules[0].schedule = Schedule::constant(32, 15).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn runs_end_to_end() {
        let run = run_cliff_experiment(&tiny(), Execution::default()).unwrap();
        let r = &run.report;
        assert_eq!(r.n_images, 36);
        assert_eq!(r.schedules.len(), 2);
        assert_eq!(r.comparisons.len(), 1);
        for (s, o) in r.schedules.iter().zip(&run.outcomes) {
            o.corpus.check_schedule(&s.schedule).unwrap();
            o.generated.check_schedule(&s.schedule).unwrap();
            assert_eq!(o.generated.n_samples(), 12);
        }
        // Coarser candidate sets can only merge latents.
        assert!(r.schedules[0].entropy.joint_bits >= r.schedules[1].entropy.joint_bits);
    }

    #[test]
    fn degenerate_single_entry_codebook() {
        let mut c = tiny();
        c.schedules = vec![NamedSchedule { name: "one".into(), schedule: Schedule::constant(1, 16).unwrap() }];
        let run = run_cliff_experiment(&c, Execution::default()).unwrap();
        let o = &run.outcomes[0];
        assert!(o.corpus.tokens().iter().all(|&x| x == 0));
        assert!(o.profile.conditional_bits.iter().all(|&h| h == 0.0));
        assert_eq!(o.profile.cliff_position, 0);
    }

    #[test]
    fn stage_failures_are_named() {
        let mut c = tiny();
        c.encoder.dim = 99;
        let err = run_cliff_experiment(&c, Execution::default()).unwrap_err();
        assert!(err.to_string().starts_with("encoder failed"), "{err}");
    }

    #[test]
    fn reports_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_report(&run_cliff_experiment(&tiny(), Execution::default()).unwrap(), a.path()).unwrap();
        write_report(&run_cliff_experiment(&tiny(), Execution::Sequential).unwrap(), b.path()).unwrap();
        let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 9);
        for name in names {
            assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap(), "{name:?}");
        }
    }
}
