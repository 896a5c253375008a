//! Configuration-driven orchestration of the full tracking pipeline.
//!
//! Everything the `lesiontrack` binary does is implemented here as plain
//! functions over a [`PipelineConfig`], so the stages are equally usable
//! from code (the crate's examples and integration tests drive them
//! directly). Each stage reads its inputs from disk and writes its outputs
//! to disk — there is no hidden state, so any stage can be re-run in
//! isolation as long as its input files exist.
//!
//! # Configuration file
//!
//! A single TOML file holds every pipeline constant:
//!
//! ```toml
//! seeds = [1, 2, 3]             # one full run per seed
//!
//! [paths]
//! volumes = "data"              # dataset directory (cases + cases.json)
//! out = "out"                   # all derived artifacts + run.json
//!
//! [phantom]
//! cases = 20
//! tier = "easy"                 # easy | hard (lesion crowding)
//! master_seed = 7
//! dims = [96, 96, 80]
//! spacing = [2.0, 2.0, 3.0]
//!
//! [segmentation]
//! suv_threshold = 3.0           # PET foreground threshold (SUV)
//! bone_hu_threshold = 300.0     # CT bone threshold for derived bone masks
//!
//! [registration]
//! source = "estimated"          # estimated | truth (phantom debugging)
//! iterations = [200, 100, 50]
//! factors = [4, 2, 1]
//! fd_step = 0.001
//! lr_matrix = 0.000001
//! lr_translation = 0.01
//! metric_axis_samples = 16
//!
//! [patch]
//! xy = 50                       # axial patch extent (fixed by the nets)
//! shape = "2d50"                # 2d50 | 3d50x5 | 3d50x11
//! channels = "ct_pet"           # ct | ct_pet | ct_seg | ct_segct
//! roi_margin_x = 10             # candidate ROI expansion (voxels)
//! roi_margin_y = 10
//! roi_margin_z = 5
//!
//! [train]
//! epochs = 400
//! batch_size = 32
//! learning_rate = 0.0001
//! l2 = 0.0005
//! dropout = 0.4
//! plateau_patience = 5
//! plateau_factor = 0.2
//! min_learning_rate = 0.00001
//! augment = true
//!
//! [tracking.threshold]
//! mode = "gmean_opt"            # or: mode = "fixed", value = 0.5
//! ```
//!
//! # Output layout
//!
//! ```text
//! <paths.volumes>/                      written by `phantom-gen`
//!   cases.json                          case manifest with the data split
//!   case_000_baseline_ct.volhdr/.volraw … case_000_truth.json
//! <paths.out>/
//!   run.json                            manifest: config snapshot, versions,
//!                                       per-stage output hashes
//!   transforms/<case>.json              `register`
//!   patches/{train,validation,test}.*   `extract` (archive per split)
//!   runs/seed_<s>/
//!     model.ltckpt, history.csv         `train`
//!     val_scores.csv, threshold.json    `train` (validation-split threshold)
//!     tracking/<case>.json              `track`
//!     test_scores.csv, reference_scores.csv,
//!     roc_model.csv, roc_reference.csv,
//!     evaluation.json                   `evaluate`
//!   report.json, summary.csv,
//!   roc_pooled_model.csv, roc_pooled_reference.csv   `report`
//! ```
//!
//! The decision threshold used for deployment tracking is always selected
//! on the **validation** split (or fixed in the config) — never on the test
//! split the evaluation reports on.

use crate::error::{Error, Result};
use crate::evaluation::{
    self, development_report, write_roc_csv, Confusion, DevelopmentReport, MetricsTable,
};
use crate::net::{
    checkpoint_sha256, load_checkpoint, save_checkpoint, intensity_reference,
    train::write_history_csv, CheckpointMeta, SiameseNet, TrainConfig, TrainPair, Variant,
};
use crate::patch::archive::{ArchiveReader, ArchiveWriter};
use crate::patch::{
    candidate_pairs, extract_pair, PatchChannels, PatchData, PatchShape, PatchSpec, RoiMargins,
    PATCH_XY,
};
use crate::phantom::{
    generate_case_with_dims, split_dataset, GroundTruth, PhantomCase, Tier, DEFAULT_DIMS,
    DEFAULT_SPACING, DEFAULT_SUV_THRESHOLD, SPLIT_RATIOS,
};
use crate::registration::{register_affine, AffineTransform, RegistrationConfig, RegistrationResult};
use crate::tracking::{categorize_against_truth, track, AssignmentReport, TruthTallies};
use crate::volume::{label_mask, segment_lesions, Lesion, Modality, Volume};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "LESIONTRACK_THREADS";
/// File name of the run manifest under the output directory.
pub const RUN_MANIFEST: &str = "run.json";
/// File name of the case manifest under the dataset directory.
pub const CASE_MANIFEST: &str = "cases.json";
/// Default CT threshold (HU) above which a voxel counts as bone.
pub const DEFAULT_BONE_HU: f64 = 300.0;

/// Applies the [`THREADS_ENV`] cap to the global worker pool.
///
/// Returns the effective worker count. Call once at process start; scoring
/// inside [`track`] parallelizes over candidate pairs and is the only
/// multi-threaded stage.
pub fn init_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(rayon::current_num_threads()),
        Err(e) => Err(Error::Usage(format!("{THREADS_ENV}: {e}"))),
        Ok(raw) => {
            let n = parse_thread_count(&raw)?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Usage(format!("{THREADS_ENV}: {e}")))?;
            Ok(n)
        }
    }
}

fn parse_thread_count(raw: &str) -> Result<usize> {
    match raw.trim().parse() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(Error::Usage(format!(
            "{THREADS_ENV} must be a positive integer, got {raw:?}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// The pipeline configuration, read from a single TOML file.
///
/// Every constant of the method appears as a named key with its default
/// (see the module docs for the full annotated file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds of the runs to execute; statistics are reported across them.
    pub seeds: Vec<u64>,
    pub paths: PathsSection,
    #[serde(default)]
    pub phantom: PhantomSection,
    #[serde(default)]
    pub segmentation: SegmentationSection,
    #[serde(default)]
    pub registration: RegistrationSection,
    #[serde(default)]
    pub patch: PatchSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub tracking: TrackingSection,
}

/// Where the dataset lives and where derived artifacts go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Dataset directory: case volumes, truth files and `cases.json`.
    pub volumes: PathBuf,
    /// Output directory: every derived artifact plus `run.json`.
    pub out: PathBuf,
}

/// Phantom dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    /// Number of cases to generate.
    pub cases: usize,
    /// Lesion crowding tier.
    pub tier: Tier,
    /// Master seed; per-case seeds are derived from it.
    pub master_seed: u64,
    /// Grid extent in voxels.
    pub dims: [usize; 3],
    /// Voxel spacing in mm.
    pub spacing: [f64; 3],
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            cases: 20,
            tier: Tier::Easy,
            master_seed: 7,
            dims: DEFAULT_DIMS,
            spacing: DEFAULT_SPACING,
        }
    }
}

/// Lesion segmentation thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationSection {
    /// PET foreground threshold (SUV).
    pub suv_threshold: f64,
    /// CT threshold (HU) for bone masks derived from CT.
    pub bone_hu_threshold: f64,
}

impl Default for SegmentationSection {
    fn default() -> Self {
        SegmentationSection {
            suv_threshold: DEFAULT_SUV_THRESHOLD,
            bone_hu_threshold: DEFAULT_BONE_HU,
        }
    }
}

/// Which transform the extraction and tracking stages use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformSource {
    /// Transforms recovered by the `register` stage (the normal pipeline).
    Estimated,
    /// The generator's true transforms from the truth files — phantom-only,
    /// for isolating downstream stages from registration error.
    Truth,
}

/// Registration settings (multi-resolution affine recovery).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationSection {
    pub source: TransformSource,
    /// Iterations per pyramid level, coarse → fine.
    pub iterations: [usize; 3],
    /// Downsampling factors per pyramid level, coarse → fine.
    pub factors: [usize; 3],
    pub fd_step: f64,
    pub lr_matrix: f64,
    pub lr_translation: f64,
    pub metric_axis_samples: usize,
}

impl Default for RegistrationSection {
    fn default() -> Self {
        let reg = RegistrationConfig::default();
        RegistrationSection {
            source: TransformSource::Estimated,
            iterations: reg.iterations,
            factors: reg.factors,
            fd_step: reg.fd_step,
            lr_matrix: reg.lr_matrix,
            lr_translation: reg.lr_translation,
            metric_axis_samples: reg.metric_axis_samples,
        }
    }
}

impl RegistrationSection {
    pub fn to_config(&self) -> RegistrationConfig {
        RegistrationConfig {
            iterations: self.iterations,
            factors: self.factors,
            fd_step: self.fd_step,
            lr_matrix: self.lr_matrix,
            lr_translation: self.lr_translation,
            metric_axis_samples: self.metric_axis_samples,
        }
    }
}

/// Patch geometry, channels and candidate-ROI margins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSection {
    /// Axial patch extent; the network architectures fix this at 50.
    pub xy: usize,
    pub shape: PatchShape,
    pub channels: PatchChannels,
    /// Candidate ROI expansion around the projected baseline lesion, in
    /// voxels of the follow-up grid.
    pub roi_margin_x: i32,
    pub roi_margin_y: i32,
    pub roi_margin_z: i32,
}

impl Default for PatchSection {
    fn default() -> Self {
        let m = RoiMargins::default();
        PatchSection {
            xy: PATCH_XY,
            shape: PatchShape::P2d50,
            channels: PatchChannels::CtPet,
            roi_margin_x: m.dx,
            roi_margin_y: m.dy,
            roi_margin_z: m.dz,
        }
    }
}

impl PatchSection {
    pub fn spec(&self) -> PatchSpec {
        PatchSpec::new(self.shape, self.channels)
    }

    pub fn margins(&self) -> RoiMargins {
        RoiMargins {
            dx: self.roi_margin_x,
            dy: self.roi_margin_y,
            dz: self.roi_margin_z,
        }
    }
}

/// Training hyperparameters; the run seed is supplied per run from `seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// ℓ² weight penalty.
    pub l2: f64,
    pub dropout: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_learning_rate: f64,
    /// Expand training pairs with axial 90°/180°/270° rotations.
    pub augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            l2: t.l2,
            dropout: t.dropout,
            plateau_patience: t.plateau_patience,
            plateau_factor: t.plateau_factor,
            min_learning_rate: t.min_learning_rate,
            augment: t.augment,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            l2: self.l2,
            dropout: self.dropout,
            plateau_patience: self.plateau_patience,
            plateau_factor: self.plateau_factor,
            min_learning_rate: self.min_learning_rate,
            augment: self.augment,
            seed,
        }
    }
}

/// How the decision threshold on `p_true` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdMode {
    /// A fixed threshold, e.g. 0.5.
    Fixed { value: f64 },
    /// The G-mean optimum on the validation split of the same run seed.
    GmeanOpt,
}

/// Tracking settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingSection {
    pub threshold: ThresholdMode,
}

impl Default for TrackingSection {
    fn default() -> Self {
        TrackingSection {
            threshold: ThresholdMode::GmeanOpt,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seeds: vec![1],
            paths: PathsSection {
                volumes: PathBuf::from("data"),
                out: PathBuf::from("out"),
            },
            phantom: PhantomSection::default(),
            segmentation: SegmentationSection::default(),
            registration: RegistrationSection::default(),
            patch: PatchSection::default(),
            train: TrainSection::default(),
            tracking: TrackingSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads and validates a TOML configuration file.
    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes the configuration as a TOML document.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidInput(e.to_string()))
    }

    /// Checks the configuration invariants.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Usage("config needs at least one seed".into()));
        }
        if self.patch.xy != PATCH_XY {
            return Err(Error::Usage(format!(
                "patch.xy must be {PATCH_XY} (the network architectures fix the axial patch extent), got {}",
                self.patch.xy
            )));
        }
        if self.patch.roi_margin_x < 0 || self.patch.roi_margin_y < 0 || self.patch.roi_margin_z < 0
        {
            return Err(Error::Usage("patch ROI margins must be >= 0".into()));
        }
        if self.phantom.cases < 3 {
            return Err(Error::Usage(format!(
                "phantom.cases must be >= 3 to fill all three splits, got {}",
                self.phantom.cases
            )));
        }
        for (name, v) in [
            ("segmentation.suv_threshold", self.segmentation.suv_threshold),
            (
                "segmentation.bone_hu_threshold",
                self.segmentation.bone_hu_threshold,
            ),
        ] {
            if !v.is_finite() {
                return Err(Error::Usage(format!("{name} must be finite, got {v}")));
            }
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Usage(
                "train.epochs and train.batch_size must be positive".into(),
            ));
        }
        for (name, v) in [
            ("train.learning_rate", t.learning_rate),
            ("train.min_learning_rate", t.min_learning_rate),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Usage(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(t.l2 >= 0.0) || !t.l2.is_finite() {
            return Err(Error::Usage(format!("train.l2 must be >= 0, got {}", t.l2)));
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return Err(Error::Usage(format!(
                "train.dropout must lie in [0, 1), got {}",
                t.dropout
            )));
        }
        if t.plateau_patience == 0 {
            return Err(Error::Usage("train.plateau_patience must be >= 1".into()));
        }
        if !(t.plateau_factor > 0.0 && t.plateau_factor < 1.0) {
            return Err(Error::Usage(format!(
                "train.plateau_factor must lie in (0, 1), got {}",
                t.plateau_factor
            )));
        }
        if let ThresholdMode::Fixed { value } = self.tracking.threshold {
            if !value.is_finite() {
                return Err(Error::Usage(format!(
                    "tracking.threshold value must be finite, got {value}"
                )));
            }
        }
        Ok(())
    }

    // ---- canonical artifact paths ----

    pub fn transforms_dir(&self) -> PathBuf {
        self.paths.out.join("transforms")
    }

    pub fn transform_path(&self, case: &str) -> PathBuf {
        self.transforms_dir().join(format!("{case}.json"))
    }

    /// Base path of a split's patch archive (the writer appends
    /// `.manifest.json` / `.patches.blob`).
    pub fn patches_base(&self, split: SplitName) -> PathBuf {
        self.paths.out.join("patches").join(split.as_str())
    }

    /// Per-seed run directory (model, threshold, tracking reports,
    /// evaluation).
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.paths.out.join("runs").join(format!("seed_{seed}"))
    }

    pub fn checkpoint_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("model.ltckpt")
    }

    pub fn report_path(&self) -> PathBuf {
        self.paths.out.join("report.json")
    }
}

// ---------------------------------------------------------------------------
// Case manifest
// ---------------------------------------------------------------------------

/// One of the three dataset splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Validation, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<SplitName> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Usage(format!(
                "unknown split {other:?}; expected train, validation or test"
            ))),
        }
    }
}

/// One generated case as listed in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub name: String,
    pub baseline_lesions: usize,
    pub followup_lesions: usize,
}

/// The dataset manifest written next to the case files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub tier: Tier,
    pub master_seed: u64,
    pub cases: Vec<CaseEntry>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl CaseManifest {
    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join(CASE_MANIFEST)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&Self::manifest_path(dir), self)
    }

    pub fn load(dir: &Path) -> Result<CaseManifest> {
        read_json(&Self::manifest_path(dir))
    }

    /// Case names of one split.
    pub fn split(&self, split: SplitName) -> &[String] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    /// All case names, in generation order.
    pub fn all_names(&self) -> impl Iterator<Item = &str> {
        self.cases.iter().map(|c| c.name.as_str())
    }
}

/// Canonical name of the `index`-th generated case.
pub fn case_name(index: usize) -> String {
    format!("case_{index:03}")
}

// ---------------------------------------------------------------------------
// Stage: phantom-gen
// ---------------------------------------------------------------------------

/// Generates the configured phantom dataset and its case manifest.
///
/// Cases are split 70/15/15 at the case level, weighted by lesion count
/// (see [`split_dataset`]). Deterministic under `phantom.master_seed`.
pub fn generate_dataset(cfg: &PipelineConfig) -> Result<CaseManifest> {
    cfg.validate()?;
    let ph = &cfg.phantom;
    let dir = &cfg.paths.volumes;
    let mut entries = Vec::with_capacity(ph.cases);
    let mut weights = Vec::with_capacity(ph.cases);
    let mut outputs = Vec::new();
    for i in 0..ph.cases {
        let (_, case) =
            generate_case_with_dims(ph.master_seed, i as u64, ph.tier, ph.dims, ph.spacing)?;
        let name = case_name(i);
        case.write(dir, &name)?;
        let (nb, nf) = case.truth.lesion_counts();
        weights.push(nb + nf);
        outputs.extend(case_files(dir, &name));
        entries.push(CaseEntry {
            name,
            baseline_lesions: nb,
            followup_lesions: nf,
        });
    }
    let split = split_dataset(&weights, SPLIT_RATIOS, ph.master_seed)?;
    let names = |ix: &[usize]| ix.iter().map(|&i| entries[i].name.clone()).collect();
    let (train, validation, test) = (
        names(&split.train),
        names(&split.validation),
        names(&split.test),
    );
    let manifest = CaseManifest {
        tier: ph.tier,
        master_seed: ph.master_seed,
        cases: entries,
        train,
        validation,
        test,
    };
    manifest.save(dir)?;
    outputs.push(CaseManifest::manifest_path(dir));
    record_stage(cfg, "phantom-gen", &[], &outputs)?;
    Ok(manifest)
}

/// All files belonging to one written case.
fn case_files(dir: &Path, name: &str) -> Vec<PathBuf> {
    let mut files = Vec::with_capacity(17);
    for part in PhantomCase::VOLUME_PARTS {
        files.push(dir.join(format!("{name}_{part}.volhdr")));
        files.push(dir.join(format!("{name}_{part}.volraw")));
    }
    files.push(dir.join(format!("{name}_truth.json")));
    files
}

// ---------------------------------------------------------------------------
// Stage: segment
// ---------------------------------------------------------------------------

/// Bone mask derived by thresholding a CT volume at `hu_threshold`.
pub fn bone_mask_from_ct(ct: &Volume, hu_threshold: f64) -> Result<Volume> {
    if ct.modality() != Modality::Ct {
        return Err(Error::InvalidInput(format!(
            "bone masks are derived from CT volumes, got {:?}",
            ct.modality()
        )));
    }
    let thr = hu_threshold as f32;
    let mut mask = Volume::zeros(ct.dims(), ct.spacing(), Modality::Mask)?;
    for (out, &v) in mask.data_mut().iter_mut().zip(ct.data()) {
        if v >= thr {
            *out = 1.0;
        }
    }
    Ok(mask)
}

/// Where the `segment` stage gets its bone mask from.
pub enum BoneSource<'a> {
    /// An existing binary mask volume on disk.
    MaskFile(&'a Path),
    /// Threshold this CT at the given HU value.
    FromCt { ct: &'a Path, hu_threshold: f64 },
}

/// Segments lesions in a PET volume and writes the binary mask.
///
/// Returns the number of labeled lesions.
pub fn run_segment(
    pet_path: &Path,
    bone: BoneSource<'_>,
    suv_threshold: f64,
    out_mask: &Path,
) -> Result<usize> {
    let pet = Volume::load(pet_path)?;
    let bone_mask = match bone {
        BoneSource::MaskFile(p) => Volume::load(p)?,
        BoneSource::FromCt { ct, hu_threshold } => {
            bone_mask_from_ct(&Volume::load(ct)?, hu_threshold)?
        }
    };
    let (mask, lesions) = segment_lesions(&pet, &bone_mask, suv_threshold)?;
    ensure_parent(out_mask)?;
    mask.save(out_mask)?;
    Ok(lesions.len())
}

// ---------------------------------------------------------------------------
// Stage: register
// ---------------------------------------------------------------------------

/// Registers two CT volume files and writes the transform JSON.
pub fn register_files(
    fixed_ct: &Path,
    moving_ct: &Path,
    config: &RegistrationConfig,
    out_json: &Path,
) -> Result<RegistrationResult> {
    let fixed = Volume::load(fixed_ct)?;
    let moving = Volume::load(moving_ct)?;
    let result = register_affine(&fixed, &moving, config)?;
    ensure_parent(out_json)?;
    result.transform.save_json(out_json)?;
    Ok(result)
}

/// Registers one case of the dataset (baseline CT fixed, follow-up CT
/// moving) and writes `<out>/transforms/<case>.json`.
pub fn register_case(cfg: &PipelineConfig, case: &str) -> Result<RegistrationResult> {
    let dir = &cfg.paths.volumes;
    register_files(
        &dir.join(format!("{case}_baseline_ct")),
        &dir.join(format!("{case}_followup_ct")),
        &cfg.registration.to_config(),
        &cfg.transform_path(case),
    )
}

/// Registers every case of the manifest.
pub fn register_all(cfg: &PipelineConfig, manifest: &CaseManifest) -> Result<Vec<RegistrationResult>> {
    let mut results = Vec::new();
    let mut outputs = Vec::new();
    for name in manifest.all_names() {
        results.push(register_case(cfg, name)?);
        outputs.push(cfg.transform_path(name));
    }
    record_stage(cfg, "register", &[], &outputs)?;
    Ok(results)
}

/// The transform a downstream stage should use for `case`, per
/// `registration.source`.
fn case_transform(cfg: &PipelineConfig, case: &str, truth: &GroundTruth) -> Result<AffineTransform> {
    match cfg.registration.source {
        TransformSource::Truth => Ok(truth.transform.clone()),
        TransformSource::Estimated => AffineTransform::load_json(cfg.transform_path(case)),
    }
}

// ---------------------------------------------------------------------------
// Stage: extract
// ---------------------------------------------------------------------------

/// Outcome of extracting one split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub cases: usize,
    pub pairs: usize,
    pub true_pairs: usize,
    pub false_pairs: usize,
}

/// Extracts labeled patch pairs for every candidate of every case in the
/// split and writes the split's archive.
///
/// Labels come from the truth edges; the transform comes from
/// `registration.source`. Pair order is (case order, baseline id,
/// follow-up id) — deterministic.
pub fn extract_split(
    cfg: &PipelineConfig,
    manifest: &CaseManifest,
    split: SplitName,
) -> Result<ExtractSummary> {
    let spec = cfg.patch.spec();
    let base = cfg.patches_base(split);
    ensure_parent(&base)?;
    let mut writer = ArchiveWriter::create(&base, spec)?;
    let mut summary = ExtractSummary {
        cases: 0,
        pairs: 0,
        true_pairs: 0,
        false_pairs: 0,
    };
    for name in manifest.split(split) {
        let case = PhantomCase::load(&cfg.paths.volumes, name)?;
        let transform = case_transform(cfg, name, &case.truth)?;
        let truth: BTreeSet<(u32, u32)> = case.truth.edges.iter().copied().collect();
        let mut pair = case.pair;
        pair.transform = Some(transform.clone());
        let baseline = lesions_by_id(&pair.baseline.mask)?;
        let followup = lesions_by_id(&pair.followup.mask)?;
        let candidates = candidate_pairs(
            &baseline.values().cloned().collect::<Vec<_>>(),
            &followup.values().cloned().collect::<Vec<_>>(),
            &transform,
            cfg.patch.margins(),
        );
        for cand in candidates {
            let b = &baseline[&cand.baseline_id];
            let f = &followup[&cand.followup_id];
            let result = extract_pair(b, f, &transform, &spec, &pair)?;
            let label = truth.contains(&(cand.baseline_id, cand.followup_id));
            writer.append(cand.baseline_id, cand.followup_id, Some(label), &result)?;
            summary.pairs += 1;
            if label {
                summary.true_pairs += 1;
            } else {
                summary.false_pairs += 1;
            }
        }
        summary.cases += 1;
    }
    writer.finish()?;
    let stage = format!("extract:{split}");
    let mut manifest_file = base.as_os_str().to_owned();
    manifest_file.push(".manifest.json");
    let mut blob_file = base.as_os_str().to_owned();
    blob_file.push(".patches.blob");
    record_stage(
        cfg,
        &stage,
        &[],
        &[PathBuf::from(manifest_file), PathBuf::from(blob_file)],
    )?;
    Ok(summary)
}

/// Labels a mask and indexes its lesions by id.
fn lesions_by_id(mask: &Volume) -> Result<BTreeMap<u32, Lesion>> {
    Ok(label_mask(mask)?.into_iter().map(|l| (l.id, l)).collect())
}

// ---------------------------------------------------------------------------
// Stage: train
// ---------------------------------------------------------------------------

/// The stored deployment threshold of one run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    /// Selection rule ("gmean_opt").
    pub mode: String,
    /// Validation-split metrics at the selected threshold.
    pub validation: MetricsTable,
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunSummary {
    pub seed: u64,
    /// Balanced training pairs actually used (before augmentation).
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Validation G-mean optimum, when the validation split has both
    /// classes.
    pub threshold: Option<MetricsTable>,
}

/// Loads a split archive into labeled training pairs.
pub fn load_labeled_pairs(base: &Path, spec: PatchSpec) -> Result<Vec<TrainPair>> {
    let mut reader = ArchiveReader::open(base)?;
    if reader.spec() != spec {
        return Err(Error::InvalidInput(format!(
            "patch archive {} holds {} patches but the config asks for {}",
            base.display(),
            reader.spec(),
            spec
        )));
    }
    let mut pairs = Vec::with_capacity(reader.len());
    for i in 0..reader.len() {
        let label = reader.records()[i].label.ok_or_else(|| {
            Error::InvalidInput(format!(
                "pair {i} in archive {} has no ground-truth label",
                base.display()
            ))
        })?;
        let (a, b) = reader.load_pair(i)?;
        pairs.push(TrainPair { a, b, label });
    }
    Ok(pairs)
}

/// Balances a labeled pair set by downsampling the majority class.
///
/// The kept majority-class pairs are drawn uniformly without replacement
/// under `seed`; output preserves the input order. Errors when either
/// class is absent.
pub fn balance_pairs(pairs: Vec<TrainPair>, seed: u64) -> Result<Vec<TrainPair>> {
    let pos: Vec<usize> = indices_where(&pairs, true);
    let neg: Vec<usize> = indices_where(&pairs, false);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidInput(format!(
            "balanced training needs both classes, got {} true / {} false pairs",
            pos.len(),
            neg.len()
        )));
    }
    let keep = pos.len().min(neg.len());
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut selected: BTreeSet<usize> = BTreeSet::new();
    for class in [pos, neg] {
        let mut ix = class;
        ix.shuffle(&mut rng);
        ix.truncate(keep);
        selected.extend(ix);
    }
    Ok(pairs
        .into_iter()
        .enumerate()
        .filter_map(|(i, p)| selected.contains(&i).then_some(p))
        .collect())
}

fn indices_where(pairs: &[TrainPair], label: bool) -> Vec<usize> {
    pairs
        .iter()
        .enumerate()
        .filter_map(|(i, p)| (p.label == label).then_some(i))
        .collect()
}

/// Trains one seed's model on the extracted archives.
///
/// Writes `model.ltckpt`, `history.csv`, `val_scores.csv` and — when the
/// validation split has both classes — `threshold.json` with the G-mean
/// optimum on the validation scores.
pub fn train_seed(cfg: &PipelineConfig, seed: u64) -> Result<TrainRunSummary> {
    let spec = cfg.patch.spec();
    let train_all = load_labeled_pairs(&cfg.patches_base(SplitName::Train), spec)?;
    let val_pairs = load_labeled_pairs(&cfg.patches_base(SplitName::Validation), spec)?;
    let balanced = balance_pairs(train_all, seed)?;

    let mut net = SiameseNet::new(Variant::from_patch_shape(spec.shape), spec.channels, seed);
    let outcome = crate::net::train(&mut net, &balanced, &val_pairs, &cfg.train.to_train_config(seed))?;

    let dir = cfg.seed_dir(seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ckpt = cfg.checkpoint_path(seed);
    save_checkpoint(
        &net,
        &CheckpointMeta {
            seed,
            epochs_trained: cfg.train.epochs,
            best_epoch: outcome.best_epoch,
            best_val_loss: outcome.best_val_loss,
        },
        &ckpt,
    )?;
    write_history_csv(&dir.join("history.csv"), &outcome.history)?;

    let val_scores = score_pairs(&net, &val_pairs)?;
    write_scores_csv(&dir.join("val_scores.csv"), &val_scores)?;
    let both_classes = val_scores.iter().any(|&(_, l)| l) && val_scores.iter().any(|&(_, l)| !l);
    let threshold = if both_classes {
        let metrics = evaluation::optimize_threshold(&val_scores)?;
        write_json(
            &dir.join("threshold.json"),
            &ThresholdRecord {
                mode: "gmean_opt".into(),
                validation: metrics,
            },
        )?;
        Some(metrics)
    } else {
        None
    };

    let mut outputs = vec![ckpt, dir.join("history.csv"), dir.join("val_scores.csv")];
    if threshold.is_some() {
        outputs.push(dir.join("threshold.json"));
    }
    record_stage(cfg, &format!("train:seed_{seed}"), &[], &outputs)?;
    Ok(TrainRunSummary {
        seed,
        train_pairs: balanced.len(),
        val_pairs: val_pairs.len(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        threshold,
    })
}

/// Scores labeled pairs with the network; output aligns with the input.
pub fn score_pairs(net: &SiameseNet, pairs: &[TrainPair]) -> Result<Vec<(f64, bool)>> {
    let refs: Vec<(&PatchData, &PatchData)> = pairs.iter().map(|p| (&p.a, &p.b)).collect();
    let scores = net.forward_pairs(&refs)?;
    Ok(scores
        .iter()
        .zip(pairs)
        .map(|(s, p)| (s.p_true, p.label))
        .collect())
}

// ---------------------------------------------------------------------------
// Stage: track
// ---------------------------------------------------------------------------

/// The deployment threshold for one run seed, per `tracking.threshold`.
///
/// `GmeanOpt` reads the threshold the `train` stage selected on the
/// validation split.
pub fn resolve_threshold(cfg: &PipelineConfig, seed: u64) -> Result<f64> {
    match cfg.tracking.threshold {
        ThresholdMode::Fixed { value } => Ok(value),
        ThresholdMode::GmeanOpt => {
            let record: ThresholdRecord = read_json(&cfg.seed_dir(seed).join("threshold.json"))?;
            Ok(record.validation.threshold)
        }
    }
}

/// Tracks every case of a split with one seed's model and writes one
/// report JSON per case under `runs/seed_<seed>/tracking/`.
pub fn track_split(
    cfg: &PipelineConfig,
    manifest: &CaseManifest,
    split: SplitName,
    seed: u64,
) -> Result<Vec<(String, AssignmentReport)>> {
    let ckpt = cfg.checkpoint_path(seed);
    let (net, _meta) = load_checkpoint(&ckpt)?;
    let sha = checkpoint_sha256(&ckpt)?;
    let threshold = resolve_threshold(cfg, seed)?;
    let out_dir = cfg.seed_dir(seed).join("tracking");
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let mut reports = Vec::new();
    let mut outputs = Vec::new();
    for name in manifest.split(split) {
        let case = PhantomCase::load(&cfg.paths.volumes, name)?;
        let transform = case_transform(cfg, name, &case.truth)?;
        let mut pair = case.pair;
        pair.transform = Some(transform);
        let mut report = track(&pair, &net, net.spec(), threshold)?;
        report.model_checkpoint_sha256 = Some(sha.clone());
        let path = out_dir.join(format!("{name}.json"));
        write_json(&path, &report)?;
        outputs.push(path);
        reports.push((name.clone(), report));
    }
    record_stage(cfg, &format!("track:seed_{seed}"), &[], &outputs)?;
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Stage: evaluate
// ---------------------------------------------------------------------------

/// Test-split evaluation of one run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub seed: u64,
    pub patch: PatchSpec,
    /// Deployment threshold the metrics row and confusion use.
    pub threshold: f64,
    /// Scored test pairs.
    pub pairs: usize,
    pub auc_model: f64,
    pub auc_reference: f64,
    /// Pair metrics of the trained model at `threshold`.
    pub metrics: MetricsTable,
    pub confusion: Confusion,
    /// Lesion-outcome tallies over all test cases.
    pub tallies: TruthTallies,
    /// Per-category success rates derived from `tallies`.
    pub development: DevelopmentReport,
}

/// Evaluates one seed's model on the test split.
///
/// Pair-level: scores the test archive with the trained model and with the
/// intensity reference (central CT slice of the same patches), writes both
/// score CSVs and ROC CSVs. Lesion-level: folds the tracking reports of
/// every test case against the truth edges. Writes `evaluation.json`.
pub fn evaluate_seed(
    cfg: &PipelineConfig,
    manifest: &CaseManifest,
    seed: u64,
) -> Result<EvaluationSummary> {
    let spec = cfg.patch.spec();
    let dir = cfg.seed_dir(seed);
    let (net, _meta) = load_checkpoint(&cfg.checkpoint_path(seed))?;
    let test_pairs = load_labeled_pairs(&cfg.patches_base(SplitName::Test), spec)?;

    let model_scores = score_pairs(&net, &test_pairs)?;
    let reference_scores: Vec<(f64, bool)> = test_pairs
        .iter()
        .map(|p| {
            intensity_reference(&central_ct_slice(&p.a), &central_ct_slice(&p.b))
                .map(|s| (s, p.label))
        })
        .collect::<Result<_>>()?;

    write_scores_csv(&dir.join("test_scores.csv"), &model_scores)?;
    write_scores_csv(&dir.join("reference_scores.csv"), &reference_scores)?;
    let roc_model = evaluation::roc(&model_scores)?;
    let roc_reference = evaluation::roc(&reference_scores)?;
    write_roc_file(&dir.join("roc_model.csv"), &roc_model)?;
    write_roc_file(&dir.join("roc_reference.csv"), &roc_reference)?;

    let threshold = resolve_threshold(cfg, seed)?;
    let confusion = evaluation::confusion(&model_scores, threshold);
    let metrics = MetricsTable::from_confusion(threshold, &confusion);

    let mut tallies = TruthTallies::default();
    for name in manifest.split(SplitName::Test) {
        let report: AssignmentReport = read_json(&dir.join("tracking").join(format!("{name}.json")))?;
        let truth = GroundTruth::load_json(cfg.paths.volumes.join(format!("{name}_truth.json")))?;
        tallies.absorb(&categorize_against_truth(&report, &truth.edges)?);
    }

    let summary = EvaluationSummary {
        seed,
        patch: spec,
        threshold,
        pairs: test_pairs.len(),
        auc_model: roc_model.auc,
        auc_reference: roc_reference.auc,
        metrics,
        confusion,
        tallies,
        development: development_report(&tallies),
    };
    write_json(&dir.join("evaluation.json"), &summary)?;
    record_stage(
        cfg,
        &format!("evaluate:seed_{seed}"),
        &[],
        &[
            dir.join("test_scores.csv"),
            dir.join("reference_scores.csv"),
            dir.join("roc_model.csv"),
            dir.join("roc_reference.csv"),
            dir.join("evaluation.json"),
        ],
    )?;
    Ok(summary)
}

/// Channel 0, central axial slice — the 2D CT patch at the extraction
/// point, as the intensity reference expects.
pub fn central_ct_slice(patch: &PatchData) -> PatchData {
    let z = patch.dim().1 / 2;
    patch
        .slice(ndarray::s![0..1, z..z + 1, .., ..])
        .to_owned()
}

// ---------------------------------------------------------------------------
// Stage: report
// ---------------------------------------------------------------------------

/// Mean ± standard deviation of one metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStat {
    pub mean: f64,
    /// Sample standard deviation (n−1); 0 for a single seed.
    pub std: f64,
    /// Per-seed values, in `seeds` order (seeds missing the metric are
    /// skipped).
    pub values: Vec<f64>,
}

impl AggregateStat {
    pub fn of(values: Vec<f64>) -> AggregateStat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        AggregateStat { mean, std, values }
    }

    /// Table-style presentation, e.g. `0.830 ± 0.003`.
    pub fn formatted(&self) -> String {
        format!("{:.3} ± {:.3}", self.mean, self.std)
    }
}

/// The aggregated multi-seed report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub patch: PatchSpec,
    pub seeds: Vec<u64>,
    pub threshold_mode: ThresholdMode,
    /// Aggregates keyed by metric name (`auc_model`, `accuracy`, …,
    /// `development/remaining_overall`, …).
    pub metrics: BTreeMap<String, AggregateStat>,
}

/// Aggregates the per-seed evaluations into mean ± std rows, writes
/// `report.json`, `summary.csv` and pooled ROC CSVs.
pub fn report_runs(cfg: &PipelineConfig) -> Result<RunReport> {
    let mut evals = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let path = cfg.seed_dir(seed).join("evaluation.json");
        evals.push(read_json::<EvaluationSummary>(&path)?);
    }

    let mut metrics: BTreeMap<String, AggregateStat> = BTreeMap::new();
    let mut add = |name: &str, values: Vec<f64>| {
        if !values.is_empty() {
            metrics.insert(name.to_string(), AggregateStat::of(values));
        }
    };
    let all = |f: fn(&EvaluationSummary) -> f64| evals.iter().map(f).collect::<Vec<_>>();
    add("auc_model", all(|e| e.auc_model));
    add("auc_reference", all(|e| e.auc_reference));
    add("threshold", all(|e| e.threshold));
    add("accuracy", all(|e| e.metrics.accuracy));
    add("sensitivity", all(|e| e.metrics.sensitivity));
    add("specificity", all(|e| e.metrics.specificity));
    add("precision", all(|e| e.metrics.precision));
    add("g_mean", all(|e| e.metrics.g_mean));
    add("f1", all(|e| e.metrics.f1));
    let dev = |f: fn(&DevelopmentReport) -> Option<f64>| {
        evals
            .iter()
            .filter_map(|e| f(&e.development))
            .collect::<Vec<_>>()
    };
    add("development/remaining_overall", dev(|d| d.remaining_overall));
    add("development/remaining_single", dev(|d| d.remaining_single));
    add("development/split", dev(|d| d.split));
    add("development/fused", dev(|d| d.fused));
    add("development/resolved", dev(|d| d.resolved));
    add("development/new", dev(|d| d.new));

    let report = RunReport {
        patch: cfg.patch.spec(),
        seeds: cfg.seeds.clone(),
        threshold_mode: cfg.tracking.threshold,
        metrics,
    };
    write_json(&cfg.report_path(), &report)?;

    let mut csv = String::from("metric,mean,std,value\n");
    for (name, stat) in &report.metrics {
        csv.push_str(&format!(
            "{name},{},{},{}\n",
            stat.mean,
            stat.std,
            stat.formatted()
        ));
    }
    let summary_path = cfg.paths.out.join("summary.csv");
    fs::write(&summary_path, csv).map_err(|e| Error::io(&summary_path, e))?;

    // Configuration-level ROC over the pooled test scores of all seeds.
    let mut pooled_model = Vec::new();
    let mut pooled_reference = Vec::new();
    for &seed in &cfg.seeds {
        let dir = cfg.seed_dir(seed);
        pooled_model.extend(read_scores_csv(&dir.join("test_scores.csv"))?);
        pooled_reference.extend(read_scores_csv(&dir.join("reference_scores.csv"))?);
    }
    let pooled_model_path = cfg.paths.out.join("roc_pooled_model.csv");
    let pooled_reference_path = cfg.paths.out.join("roc_pooled_reference.csv");
    write_roc_file(&pooled_model_path, &evaluation::roc(&pooled_model)?)?;
    write_roc_file(&pooled_reference_path, &evaluation::roc(&pooled_reference)?)?;

    record_stage(
        cfg,
        "report",
        &[],
        &[
            cfg.report_path(),
            summary_path,
            pooled_model_path,
            pooled_reference_path,
        ],
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

/// Runs every stage in order: generate, register (unless the config says
/// to use truth transforms), extract, then train/track/evaluate per seed,
/// and finally the aggregated report.
pub fn run_full_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let manifest = generate_dataset(cfg)?;
    if cfg.registration.source == TransformSource::Estimated {
        register_all(cfg, &manifest)?;
    }
    for split in SplitName::ALL {
        extract_split(cfg, &manifest, split)?;
    }
    for &seed in &cfg.seeds {
        train_seed(cfg, seed)?;
        track_split(cfg, &manifest, SplitName::Test, seed)?;
        evaluate_seed(cfg, &manifest, seed)?;
    }
    report_runs(cfg)
}

// ---------------------------------------------------------------------------
// Run manifest (run.json)
// ---------------------------------------------------------------------------

/// Tool identification stored in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
    /// Magic of the checkpoint container format.
    pub checkpoint_format: String,
}

impl Default for ToolInfo {
    fn default() -> Self {
        ToolInfo {
            name: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: "LTCKPT1".to_string(),
        }
    }
}

/// One stage's entry in the run manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Input files the stage read (paths as configured).
    pub inputs: Vec<String>,
    /// Output files the stage wrote, with their SHA-256 hashes.
    pub outputs: BTreeMap<String, String>,
}

/// The `run.json` manifest: config snapshot, tool versions and per-stage
/// output hashes. Contains nothing time-dependent, so identical runs
/// produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: ToolInfo,
    pub config: PipelineConfig,
    pub stages: BTreeMap<String, StageRecord>,
}

/// Records a finished stage in `<out>/run.json`, hashing every output
/// file.
pub fn record_stage(
    cfg: &PipelineConfig,
    stage: &str,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let path = cfg.paths.out.join(RUN_MANIFEST);
    let mut manifest = if path.exists() {
        read_json::<RunManifest>(&path)?
    } else {
        RunManifest {
            tool: ToolInfo::default(),
            config: cfg.clone(),
            stages: BTreeMap::new(),
        }
    };
    manifest.config = cfg.clone();
    let mut record = StageRecord {
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: BTreeMap::new(),
    };
    for out in outputs {
        record
            .outputs
            .insert(out.display().to_string(), file_sha256(out)?);
    }
    manifest.stages.insert(stage.to_string(), record);
    write_json(&path, &manifest)
}

/// Streaming SHA-256 of a file, hex-encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Small file helpers
// ---------------------------------------------------------------------------

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

/// Writes a value as pretty JSON (with a trailing newline).
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a JSON file into a value, naming the file on both I/O and format
/// errors.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes `(p_true, label)` rows as `p_true,label` CSV (label 0/1).
pub fn write_scores_csv(path: &Path, scores: &[(f64, bool)]) -> Result<()> {
    ensure_parent(path)?;
    let mut text = String::from("p_true,label\n");
    for (score, label) in scores {
        text.push_str(&format!("{score},{}\n", u8::from(*label)));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by [`write_scores_csv`].
pub fn read_scores_csv(path: &Path) -> Result<Vec<(f64, bool)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("p_true,label") => {}
        other => {
            return Err(Error::format(
                path,
                format!("expected header \"p_true,label\", got {other:?}"),
            ))
        }
    }
    let mut scores = Vec::new();
    for (i, line) in lines.enumerate() {
        let (s, l) = line.split_once(',').ok_or_else(|| {
            Error::format(path, format!("row {}: expected two columns", i + 2))
        })?;
        let score: f64 = s
            .parse()
            .map_err(|_| Error::format(path, format!("row {}: bad score {s:?}", i + 2)))?;
        let label = match l {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::format(
                    path,
                    format!("row {}: bad label {other:?}", i + 2),
                ))
            }
        };
        scores.push((score, label));
    }
    Ok(scores)
}

fn write_roc_file(path: &Path, curve: &evaluation::RocCurve) -> Result<()> {
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_roc_csv(std::io::BufWriter::new(file), curve).map_err(|e| Error::io(path, e))
}
