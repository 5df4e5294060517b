//! Pipeline configuration: one TOML file drives every subcommand.
//!
//! The effective config is `defaults <- file <- --set overrides <- endpoint
//! env override`, validated as a whole. Its hash (SHA-256 of a canonical
//! TOML form with run seeds and output paths blanked) is stamped into every
//! artifact so downstream commands can refuse mixed inputs; the run seed is
//! deliberately not part of the hash and travels separately.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::BlobConfig;
use crate::error::{Error, Result};
use crate::estimator::remote::DEFAULT_TIMEOUT;
use crate::eval::EvalConfig;
use crate::sde::SimConfig;
use crate::training::{EstimatorKind, TrainConfig};

/// Destination directory for all artifacts of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

/// Everything a full pipeline invocation needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub sim: SimConfig,
    pub blob: BlobConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
    /// Run seeds for multi-seed training. All runs share the one dataset
    /// fixed by `sim.seed`; each run seed replaces `train.seed` only, so
    /// seeds vary the initialization and batch draws, not the data.
    pub seeds: Vec<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            // Seed 15 gives a trajectory that occupies both wells evenly
            // enough (0.97 left/right balance) for the downstream field
            // recovery; many seeds leave one well undersampled at N = 5000.
            sim: SimConfig { dt: 0.002, n_steps: 5000, x0: vec![0.0], seed: 15 },
            blob: BlobConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
            seeds: (0..10).collect(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.blob.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one run seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be unique".into()));
        }
        if self.blob.grid_h * self.blob.grid_w < 1 {
            return Err(Error::Config("blob grid must be non-empty".into()));
        }
        if self.sim.x0.len() != self.train.latent_dim {
            return Err(Error::Config(format!(
                "sim.x0 has dimension {} but train.latent_dim is {}",
                self.sim.x0.len(),
                self.train.latent_dim
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form, identifying the scientific
    /// parameters, `sim.seed` included (it fixes the dataset). The run
    /// seeds and the output directory are blanked first: the same
    /// artifacts must compare equal regardless of which seed list batch
    /// produced them or where they were written.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.train.seed = 0;
        canon.seeds = Vec::new();
        canon.output = OutputConfig::default();
        let text = toml::to_string(&canon).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// The training config for one run seed.
    pub fn train_for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    /// Points the estimator at `endpoint`, keeping an existing remote
    /// timeout. Empty strings are ignored. Used for the env-var override.
    pub fn override_endpoint(&mut self, endpoint: Option<&str>) {
        let Some(endpoint) = endpoint.filter(|e| !e.trim().is_empty()) else {
            return;
        };
        let timeout_ms = match &self.train.estimator {
            EstimatorKind::Remote { timeout_ms, .. } => *timeout_ms,
            EstimatorKind::Local => DEFAULT_TIMEOUT.as_millis() as u64,
        };
        self.train.estimator =
            EstimatorKind::Remote { endpoint: endpoint.trim().to_string(), timeout_ms };
    }
}

/// Parses one `--set key=value` argument against a TOML document.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set {spec:?}: expected key=value")))?;
    let key = key.trim();
    let segments: Vec<&str> = key.split('.').collect();
    if key.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("--set {spec:?}: empty key segment")));
    }
    let mut current = table;
    for seg in &segments[..segments.len() - 1] {
        current = current
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("--set {key}: {seg} is not a table of settings"))
            })?;
    }
    current.insert(segments[segments.len() - 1].to_string(), parse_toml_value(raw.trim()));
    Ok(())
}

/// Interprets the raw value as TOML; bare words fall back to strings so
/// `--set output.dir=runs` works without quoting.
fn parse_toml_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    if let Ok(table) = doc.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

/// Loads the effective config: the optional file over built-in defaults,
/// then `--set` overrides. The result is validated.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<PipelineConfig> {
    let mut table = toml::Table::try_from(PipelineConfig::default()).expect("default serializes");
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let file_table: toml::Table = text.parse().map_err(|e| {
            Error::Config(format!("{}: malformed config: {e}", p.display()))
        })?;
        merge_table(&mut table, file_table);
    }
    for spec in sets {
        apply_override(&mut table, spec)?;
    }
    let cfg: PipelineConfig = table
        .try_into()
        .map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Lays `from` over `base`: tables merge recursively, every other value
/// (arrays included) replaces wholesale. Keys unknown to the schema are
/// kept so that deserialization can reject them by name.
fn merge_table(base: &mut toml::Table, from: toml::Table) {
    for (key, value) in from {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(f)) => merge_table(b, f),
            (Some(slot), value) => *slot = value,
            (None, value) => {
                base.insert(key, value);
            }
        }
    }
}

/// Parses a seed list argument: a single seed `7`, a comma list `0,3,9`, or
/// an inclusive range `0..9` (which is seeds 0 through 9, ten in total).
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    let s = s.trim();
    let parse_one = |t: &str| -> Result<u64> {
        t.trim()
            .parse()
            .map_err(|_| Error::Config(format!("invalid seed {t:?} in {s:?}")))
    };
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (parse_one(a)?, parse_one(b)?);
        if a > b {
            return Err(Error::Config(format!("seed range {s:?} is empty")));
        }
        (a..=b).collect()
    } else {
        s.split(',').map(parse_one).collect::<Result<_>>()?
    };
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(Error::Config(format!("seed list {s:?} has duplicates")));
    }
    Ok(seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn default_config_validates() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.sim.dt, 0.002);
        assert_eq!(cfg.sim.n_steps, 5000);
        assert_eq!(cfg.blob.grid_h, 51);
        assert_eq!(cfg.train.steps, 300);
        assert_eq!(cfg.seeds.len(), 10);
    }

    #[test]
    fn toml_round_trip_preserves_the_config() {
        let cfg = PipelineConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: PipelineConfig = text.parse::<toml::Table>().unwrap().try_into().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn hash_ignores_run_seeds_and_output_but_not_science() {
        let base = PipelineConfig::default();
        let h0 = base.hash();
        assert_eq!(h0.len(), 64);
        assert_eq!(h0, base.hash(), "hash is deterministic");

        let mut seeded = base.clone();
        seeded.train.seed = 7;
        seeded.seeds = vec![42];
        seeded.output.dir = PathBuf::from("elsewhere");
        assert_eq!(seeded.hash(), h0);

        let mut other = base.clone();
        other.sim.dt = 0.004;
        assert_ne!(other.hash(), h0);

        // The simulation seed fixes the dataset, so it is science, not a
        // run seed: artifacts from different datasets must not mix.
        let mut resimulated = base.clone();
        resimulated.sim.seed = 99;
        assert_ne!(resimulated.hash(), h0);
    }

    #[test]
    fn shipped_default_file_matches_builtin_defaults() {
        let text = include_str!("../../../config/default.toml");
        let cfg: PipelineConfig = text
            .parse::<toml::Table>()
            .expect("shipped config parses")
            .try_into()
            .expect("shipped config maps onto PipelineConfig");
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn load_without_file_gives_defaults() {
        let cfg = load_config(None, &[]).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn partial_file_overlays_the_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.toml");
        std::fs::write(&path, "seeds = [3]\n[sim]\nn_steps = 120\n[train]\nsteps = 7\n").unwrap();
        let cfg = load_config(Some(&path), &[]).unwrap();
        assert_eq!(cfg.sim.n_steps, 120);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.seeds, vec![3]);
        // Everything the file does not mention keeps its default.
        assert_eq!(cfg.sim.dt, PipelineConfig::default().sim.dt);
        assert_eq!(cfg.blob, PipelineConfig::default().blob);

        let err = load_config(Some(&path), &["train.stepz=1".to_string()]).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("stepz")), "{err}");
    }

    #[test]
    fn file_with_unknown_keys_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("typo.toml");
        std::fs::write(&path, "[sim]\nn_stepz = 120\n").unwrap();
        let err = load_config(Some(&path), &[]).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("n_stepz")), "{err}");
    }

    #[test]
    fn set_overrides_walk_dotted_paths() {
        let sets = vec![
            "train.steps=500".to_string(),
            "sim.dt=0.004".to_string(),
            "blob.sigma_px=3.5".to_string(),
            "seeds=[1, 2, 3]".to_string(),
            "output.dir=runs".to_string(),
        ];
        let cfg = load_config(None, &sets).unwrap();
        assert_eq!(cfg.train.steps, 500);
        assert_eq!(cfg.sim.dt, 0.004);
        assert_eq!(cfg.blob.sigma_px, 3.5);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.output.dir, PathBuf::from("runs"));
    }

    #[test]
    fn set_can_switch_the_estimator_to_remote() {
        let sets = vec![
            "train.estimator.kind=remote".to_string(),
            "train.estimator.endpoint=http://127.0.0.1:9000".to_string(),
            "train.estimator.timeout_ms=2500".to_string(),
            "train.grad_through_estimator=false".to_string(),
        ];
        let cfg = load_config(None, &sets).unwrap();
        assert_eq!(
            cfg.train.estimator,
            EstimatorKind::Remote {
                endpoint: "http://127.0.0.1:9000".to_string(),
                timeout_ms: 2500
            }
        );
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let err = load_config(None, &["train.stepz=500".to_string()]).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("stepz")), "{err}");

        let err = load_config(None, &["train.steps".to_string()]).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("key=value")), "{err}");

        let err = load_config(None, &["sim.dt=banana".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "string where float expected: {err}");
    }

    #[test]
    fn invalid_values_fail_validation() {
        let err = load_config(None, &["sim.dt=0.0".to_string()]).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("dt")), "{err}");
        let err = load_config(None, &["seeds=[]".to_string()]).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("seed")), "{err}");
        let err = load_config(None, &["seeds=[1, 1]".to_string()]).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("unique")), "{err}");
    }

    #[test]
    fn config_file_loads_and_set_wins_over_file() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[train]\nsteps = 42\n[sim]\ndt = 0.004\n").unwrap();
        let cfg = load_config(Some(&path), &[]).unwrap();
        assert_eq!((cfg.train.steps, cfg.sim.dt), (42, 0.004));

        let cfg = load_config(Some(&path), &["train.steps=77".to_string()]).unwrap();
        assert_eq!(cfg.train.steps, 77, "--set outranks the file");
        assert_eq!(cfg.sim.dt, 0.004, "untouched file values survive");
    }

    #[test]
    fn missing_config_file_is_io() {
        let err = load_config(Some(Path::new("/nonexistent/cfg.toml")), &[]).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn endpoint_override_rewrites_the_estimator() {
        let mut cfg = PipelineConfig::default();
        cfg.override_endpoint(None);
        assert_eq!(cfg.train.estimator, EstimatorKind::Local);
        cfg.override_endpoint(Some(""));
        assert_eq!(cfg.train.estimator, EstimatorKind::Local);

        cfg.override_endpoint(Some("http://10.0.0.5:8800"));
        assert_eq!(
            cfg.train.estimator,
            EstimatorKind::Remote {
                endpoint: "http://10.0.0.5:8800".to_string(),
                timeout_ms: DEFAULT_TIMEOUT.as_millis() as u64
            }
        );

        // A second override keeps the configured timeout.
        cfg.train.estimator =
            EstimatorKind::Remote { endpoint: "http://old".to_string(), timeout_ms: 1234 };
        cfg.override_endpoint(Some("http://new"));
        assert_eq!(
            cfg.train.estimator,
            EstimatorKind::Remote { endpoint: "http://new".to_string(), timeout_ms: 1234 }
        );
    }

    #[test]
    fn seed_lists_parse_inclusive_ranges_and_commas() {
        assert_eq!(parse_seed_list("0..9").unwrap(), (0..=9).collect::<Vec<u64>>());
        assert_eq!(parse_seed_list("5").unwrap(), vec![5]);
        assert_eq!(parse_seed_list("4,1,7").unwrap(), vec![4, 1, 7]);
        assert_eq!(parse_seed_list("3..3").unwrap(), vec![3]);
        assert!(parse_seed_list("9..0").is_err());
        assert!(parse_seed_list("a..b").is_err());
        assert!(parse_seed_list("1,1").is_err());
        assert!(parse_seed_list("").is_err());
    }

    #[test]
    fn mismatched_latent_dim_is_rejected() {
        let err = load_config(None, &["sim.x0=[0.0, 0.0]".to_string()]).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("latent_dim")), "{err}");
    }
}
