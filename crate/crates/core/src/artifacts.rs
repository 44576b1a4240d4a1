//! On-disk layout shared by the pipeline stages and the service.
//!
//! ```text
//! <root>/regions/<id>/clinical.json
//! <root>/regions/<id>/schedule.json
//! <root>/regions/<id>/meta.json
//! <root>/regions/<id>/seird/{draws.json, trajectories.bin}
//! <root>/regions/<id>/optimal-<fingerprint>.json
//! <root>/npi/<variant>/npi_draws.json
//! ```

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::{EconParams, EconScenario};
use crate::counterfactual::{counterfactual_draws, CounterfactualDraw};
use crate::error::{Error, Result};
use crate::inference::PosteriorDrawSet;
use crate::ingest::{ClinicalSeries, PolicySchedule};
use crate::regression::{HierarchicalFit, ModelVariant, NPI_FIT_FILE};

/// Per-region inputs to the cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMeta {
    pub region_id: String,
    pub population: u64,
    pub start_date: NaiveDate,
    /// Growth of daily tests, per million per day.
    pub test_ramp: f64,
    /// Regional over national per capita income.
    pub income_ratio: f64,
}

impl RegionMeta {
    pub fn econ(&self, scenario: &EconScenario) -> EconParams {
        let mut econ = EconParams::for_scenario(scenario).with_regional_income(self.income_ratio, 1.0);
        econ.test_ramp = self.test_ramp;
        econ
    }
}

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    pub root: PathBuf,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path, producer: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_owned(),
            producer: producer.to_owned(),
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

impl ArtifactStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn region_dir(&self, region: &str) -> PathBuf {
        self.root.join("regions").join(region)
    }

    pub fn seird_dir(&self, region: &str) -> PathBuf {
        self.region_dir(region).join("seird")
    }

    pub fn npi_dir(&self, variant: ModelVariant) -> PathBuf {
        self.root.join("npi").join(variant.to_string())
    }

    /// Regions with ingested data, sorted by id.
    pub fn regions(&self) -> Result<Vec<String>> {
        let dir = self.root.join("regions");
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if entry.path().join("meta.json").exists() {
                out.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn save_region(&self, meta: &RegionMeta, clinical: &ClinicalSeries, schedule: &PolicySchedule) -> Result<()> {
        let dir = self.region_dir(&meta.region_id);
        write_json(&dir.join("meta.json"), meta)?;
        write_json(&dir.join("clinical.json"), clinical)?;
        write_json(&dir.join("schedule.json"), schedule)
    }

    pub fn meta(&self, region: &str) -> Result<RegionMeta> {
        read_json(&self.region_dir(region).join("meta.json"), &format!("ingest --region {region}"))
    }

    pub fn clinical(&self, region: &str) -> Result<ClinicalSeries> {
        read_json(&self.region_dir(region).join("clinical.json"), &format!("ingest --region {region}"))
    }

    pub fn schedule(&self, region: &str) -> Result<PolicySchedule> {
        read_json(&self.region_dir(region).join("schedule.json"), &format!("ingest --region {region}"))
    }

    pub fn save_draws(&self, set: &PosteriorDrawSet) -> Result<()> {
        set.save(&self.seird_dir(&set.region_id))
    }

    pub fn draws(&self, region: &str) -> Result<PosteriorDrawSet> {
        let dir = self.seird_dir(region);
        if !dir.join("draws.json").exists() {
            return Err(Error::MissingArtifact {
                path: dir.join("draws.json"),
                producer: format!("fit-seird --region {region}"),
            });
        }
        PosteriorDrawSet::load(&dir)
    }

    pub fn save_npi_fit(&self, fit: &HierarchicalFit) -> Result<()> {
        let path = self.npi_dir(fit.variant).join(NPI_FIT_FILE);
        write_json(&path, fit)
    }

    pub fn npi_fit(&self, variant: ModelVariant) -> Result<HierarchicalFit> {
        read_json(
            &self.npi_dir(variant).join(NPI_FIT_FILE),
            &format!("fit-npi --variant {variant}"),
        )
    }

    /// SHA-256 over the bytes of the given artifact files, in order.
    pub fn fingerprint(paths: &[PathBuf]) -> Result<String> {
        let mut h = Sha256::new();
        for p in paths {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Fingerprint of everything a counterfactual for `region` depends on.
    pub fn region_fingerprint(&self, region: &str, variant: ModelVariant) -> Result<String> {
        let seird = self.seird_dir(region);
        Self::fingerprint(&[
            self.region_dir(region).join("meta.json"),
            self.region_dir(region).join("schedule.json"),
            seird.join("draws.json"),
            seird.join("trajectories.bin"),
            self.npi_dir(variant).join(NPI_FIT_FILE),
        ])
    }

    /// Everything needed to evaluate policies in one region.
    pub fn bundle(&self, region: &str, variant: ModelVariant, max_draws: usize, seed: u64) -> Result<RegionBundle> {
        let meta = self.meta(region)?;
        let clinical = self.clinical(region)?;
        let schedule = self.schedule(region)?;
        let set = self.draws(region)?;
        let fit = self.npi_fit(variant)?;
        let draws = counterfactual_draws(&set, &fit, &schedule, max_draws, seed)?;
        Ok(RegionBundle {
            fingerprint: self.region_fingerprint(region, variant)?,
            meta,
            clinical,
            schedule,
            set,
            draws,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RegionBundle {
    pub meta: RegionMeta,
    pub clinical: ClinicalSeries,
    pub schedule: PolicySchedule,
    pub set: PosteriorDrawSet,
    pub draws: Vec<CounterfactualDraw>,
    pub fingerprint: String,
}

impl RegionBundle {
    pub fn weeks(&self) -> usize {
        self.draws.first().map_or(0, |d| d.weeks())
    }
}

/// Short stable hash of any serializable value.
pub fn value_fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    hex::encode(Sha256::digest(&bytes))
}
