//! File-driven orchestration of the full chain, used by the `atlas` binary
//! and the end-to-end examples.
//!
//! A [`PipelineConfig`] names the input files and estimation presets; each
//! command reads what it needs, writes CSV/JSON outputs into the output
//! directory, and emits a [`RunManifest`] with input digests and per-stage
//! row counts. Identical config and seed produce byte-identical outputs
//! (manifest timing aside).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AtlasError, Result};
use crate::interpolate;
use crate::io;
use crate::market::{self, BridgeConfig, MarketConfig};
use crate::ols;
use crate::panel::{self, DropLog, Panel, RawSeries, SpecConfig, Transform, VariableSpec};
use crate::qdgmm;
use crate::report;
use crate::shiftshare::{self, IVDesign, InstrumentSet};

/// Geometry file bundle for the interpolation stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometryConfig {
    /// GeoJSON of source regions (the count-reporting system).
    pub source: PathBuf,
    /// GeoJSON of target regions.
    pub target: PathBuf,
    /// Feature property holding the region id.
    #[serde(default = "default_id_property")]
    pub id_property: String,
    /// CSV of weighted points (`geoid,x,y,population`). The engine consumes
    /// whatever representative points the file provides (centroids or
    /// population-weighted interior points alike).
    pub points: PathBuf,
    /// Population-vintage overrides: years listed here read their points
    /// from a different file.
    #[serde(default)]
    pub per_year_points: BTreeMap<i32, PathBuf>,
    /// Boundary-change handling: region ids excluded from the listed year's
    /// totals before interpolation, recorded in the diagnostics.
    #[serde(default)]
    pub exclusions: BTreeMap<i32, Vec<String>>,
    #[serde(default = "default_vintage")]
    pub vintage: i32,
}

fn default_id_property() -> String {
    "GEOID".into()
}

fn default_vintage() -> i32 {
    2010
}

/// A derived ratio variable added to the series before estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DerivedRatio {
    pub name: String,
    pub numerator: String,
    pub denominator: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmploymentMode {
    /// Actual employment change instrumented alongside the rent terms.
    #[default]
    Endogenous,
    /// Predicted employment used directly as an exogenous control; only the
    /// constraint interactions remain excluded instruments.
    PredictedExogenous,
}

/// IV system: piecewise rent terms plus the employment change, instrumented
/// by the shift-share predictor and its supply-constraint interactions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IvPreset {
    pub spec: SpecConfig,
    /// Series variable whose log difference is the employment channel.
    pub employment: String,
    #[serde(default)]
    pub employment_mode: EmploymentMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginsGrid {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

/// One named estimation recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "kebab-case")]
pub enum EstimatePreset {
    Ols {
        spec: SpecConfig,
        #[serde(default)]
        margins: Option<MarginsGrid>,
    },
    QuasiDifference {
        spec: SpecConfig,
        /// Reporting scale for the outcome levels (e.g. 1e4 for a
        /// per-10,000 rate). The moment root and its covariance are exactly
        /// invariant to it; the scale used is recorded in the label.
        #[serde(default = "default_outcome_scale")]
        outcome_scale: f64,
    },
    Iv(IvPreset),
}

fn default_outcome_scale() -> f64 {
    1.0
}

impl EstimatePreset {
    fn spec(&self) -> &SpecConfig {
        match self {
            EstimatePreset::Ols { spec, .. } => spec,
            EstimatePreset::QuasiDifference { spec, .. } => spec,
            EstimatePreset::Iv(iv) => &iv.spec,
        }
    }
}

/// Market simulation stage settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateConfig {
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default = "default_shift")]
    pub shift_fraction: f64,
    /// (period, supply factor) shocks applied before that period clears.
    #[serde(default)]
    pub shocks: Vec<(usize, f64)>,
    /// Also run the ensemble bridge and estimate the piecewise response.
    #[serde(default)]
    pub run_bridge: bool,
}

fn default_t_max() -> usize {
    6
}

fn default_shift() -> f64 {
    0.05
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            t_max: default_t_max(),
            shift_fraction: default_shift(),
            shocks: Vec::new(),
            run_bridge: false,
        }
    }
}

/// Sanity-check stage settings: correlate the first variable against the
/// second, per year, raw and logged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidateConfig {
    pub x_variable: String,
    pub y_variable: String,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        ValidateConfig {
            x_variable: "crowded_rate".into(),
            y_variable: "chronic_rate".into(),
        }
    }
}

/// Top-level configuration file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub geometry: Option<GeometryConfig>,
    /// CSV of source-region counts (`region_id,year,count`).
    #[serde(default)]
    pub counts: Option<PathBuf>,
    /// Long-format series CSV (`msa_id,year,variable,value`).
    #[serde(default)]
    pub series: Option<PathBuf>,
    /// Deflator CSV (`year,index`); when present, the listed variables are
    /// converted to real terms on load.
    #[serde(default)]
    pub deflator: Option<PathBuf>,
    #[serde(default = "default_deflate_variables")]
    pub deflate_variables: Vec<String>,
    #[serde(default = "default_derived")]
    pub derived: Vec<DerivedRatio>,
    /// Supply constraints CSV (`msa_id,wri,elasticity,undevelopable_share`).
    #[serde(default)]
    pub eta: Option<PathBuf>,
    /// Industry shares CSV (`msa_id,year,naics2,share`).
    #[serde(default)]
    pub industry_shares: Option<PathBuf>,
    /// National growth CSV (`naics2,year,log_growth`).
    #[serde(default)]
    pub national_growth: Option<PathBuf>,
    /// Extra presets; names here shadow the built-ins.
    #[serde(default)]
    pub presets: BTreeMap<String, EstimatePreset>,
    #[serde(default)]
    pub market: Option<MarketConfig>,
    #[serde(default)]
    pub bridge: Option<BridgeConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub validate: Option<ValidateConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_seed() -> u64 {
    42
}

fn default_deflate_variables() -> Vec<String> {
    [
        "median_rent",
        "median_hh_income",
        "income_q1",
        "income_q2",
        "income_q3",
        "income_q4",
        "income_q5",
        "rent_p05",
        "rent_p15",
        "rent_p25",
        "rent_p50",
    ]
    .map(String::from)
    .to_vec()
}

fn default_derived() -> Vec<DerivedRatio> {
    vec![
        DerivedRatio {
            name: "chronic_rate".into(),
            numerator: "chronic_count".into(),
            denominator: "population".into(),
        },
        DerivedRatio {
            name: "crowded_rate".into(),
            numerator: "crowded_units".into(),
            denominator: "total_units".into(),
        },
    ]
}

/// The built-in estimation recipes. Pooled variants cover 2011-2016 plus
/// 2016-2020; longrun variants difference 2011-2020 directly.
pub fn builtin_presets() -> BTreeMap<String, EstimatePreset> {
    let pooled = vec![(2011, 2016), (2016, 2020)];
    let longrun = vec![(2011, 2020)];
    let main_covs = || {
        vec![
            VariableSpec::level("pct_public_assistance"),
            VariableSpec::level("median_hh_income"),
        ]
    };
    let margins = Some(MarginsGrid {
        min: -0.10,
        max: 0.10,
        steps: 41,
    });

    let mut presets = BTreeMap::new();
    let mut ols_preset = |name: &str, spec: SpecConfig, with_margins: bool| {
        presets.insert(
            name.to_string(),
            EstimatePreset::Ols {
                spec,
                margins: if with_margins { margins.clone() } else { None },
            },
        );
    };

    for (name, outcome, periods) in [
        ("chronic-pooled", "chronic_rate", pooled.clone()),
        ("crowded-pooled", "crowded_rate", pooled.clone()),
        ("chronic-longrun", "chronic_rate", longrun.clone()),
        ("crowded-longrun", "crowded_rate", longrun.clone()),
    ] {
        ols_preset(
            name,
            SpecConfig {
                label: name.into(),
                outcome: VariableSpec::log(outcome),
                split: Some(VariableSpec::log("median_rent")),
                covariates: main_covs(),
                periods,
            },
            true,
        );
    }

    for q in 1..=5 {
        let name = format!("chronic-income-q{q}");
        ols_preset(
            &name,
            SpecConfig {
                label: name.clone(),
                outcome: VariableSpec::log("chronic_rate"),
                split: Some(VariableSpec::log("median_rent")),
                covariates: vec![
                    VariableSpec::level("pct_public_assistance"),
                    VariableSpec::log(format!("income_q{q}")),
                ],
                periods: pooled.clone(),
            },
            false,
        );
    }

    for pct in ["p05", "p15", "p25", "p50"] {
        let name = format!("chronic-rent-{pct}");
        ols_preset(
            &name,
            SpecConfig {
                label: name.clone(),
                outcome: VariableSpec::log("chronic_rate"),
                split: Some(VariableSpec::log(format!("rent_{pct}"))),
                covariates: vec![
                    VariableSpec::level("pct_public_assistance"),
                    VariableSpec::log("median_hh_income"),
                ],
                periods: longrun.clone(),
            },
            false,
        );
    }

    // Vacancy cross-checks run unsplit, one direction each.
    ols_preset(
        "vacancy-on-rent",
        SpecConfig {
            label: "vacancy-on-rent".into(),
            outcome: VariableSpec::log("vacancy_rate"),
            split: None,
            covariates: vec![VariableSpec::level("median_rent")],
            periods: pooled.clone(),
        },
        false,
    );
    ols_preset(
        "rent-on-vacancy",
        SpecConfig {
            label: "rent-on-vacancy".into(),
            outcome: VariableSpec::level("median_rent"),
            split: None,
            covariates: vec![VariableSpec::log("vacancy_rate")],
            periods: pooled.clone(),
        },
        false,
    );

    // Unemployment variants reuse the same machinery with a different split.
    for (name, outcome, covs) in [
        ("unemp-chronic", "chronic_rate", main_covs()),
        (
            "unemp-chronic-noincome",
            "chronic_rate",
            vec![VariableSpec::level("pct_public_assistance")],
        ),
        ("unemp-crowded", "crowded_rate", main_covs()),
    ] {
        ols_preset(
            name,
            SpecConfig {
                label: name.into(),
                outcome: VariableSpec::log(outcome),
                split: Some(VariableSpec::log("unemployment_rate")),
                covariates: covs,
                periods: pooled.clone(),
            },
            false,
        );
    }

    // Quasi-differenced multiplicative-mean variants: outcomes and the split
    // stay in levels (the split coefficients read as semi-elasticities).
    for (name, outcome, split, scale) in [
        ("qd-chronic", "chronic_rate", "median_rent", 1.0),
        ("qd-chronic-per10k", "chronic_rate", "median_rent", 1.0e4),
        ("qd-crowded", "crowded_rate", "median_rent", 1.0),
        ("qd-unemp-chronic", "chronic_rate", "unemployment_rate", 1.0),
        ("qd-unemp-crowded", "crowded_rate", "unemployment_rate", 1.0),
    ] {
        presets.insert(
            name.to_string(),
            EstimatePreset::QuasiDifference {
                spec: SpecConfig {
                    label: name.into(),
                    outcome: VariableSpec::level(outcome),
                    split: Some(VariableSpec::level(split)),
                    covariates: main_covs(),
                    periods: pooled.clone(),
                },
                outcome_scale: scale,
            },
        );
    }

    for (name, mode) in [
        ("iv-main", EmploymentMode::Endogenous),
        ("iv-predicted-employment", EmploymentMode::PredictedExogenous),
    ] {
        presets.insert(
            name.to_string(),
            EstimatePreset::Iv(IvPreset {
                spec: SpecConfig {
                    label: name.into(),
                    outcome: VariableSpec::log("chronic_rate"),
                    split: Some(VariableSpec::log("median_rent")),
                    covariates: vec![VariableSpec::level("pct_public_assistance")],
                    periods: pooled.clone(),
                },
                employment: "employment".into(),
                employment_mode: mode,
            }),
        );
    }

    presets
}

/// Per-stage accounting for the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub name: String,
    pub rows_in: usize,
    pub rows_out: usize,
    pub drops: usize,
}

/// Run provenance: digests, versions, row accounting, wall-clock.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_digest: String,
    pub input_digests: BTreeMap<String, String>,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    /// Wall-clock per stage; varies run to run and is excluded from
    /// determinism comparisons.
    pub timing_ms: BTreeMap<String, u128>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// A loaded pipeline: config plus resolved paths.
pub struct Pipeline {
    pub config: PipelineConfig,
    config_dir: PathBuf,
    config_digest: String,
    out_dir: PathBuf,
    seed: u64,
}

struct ManifestBuilder {
    command: String,
    input_digests: BTreeMap<String, String>,
    stages: Vec<StageRecord>,
    timing_ms: BTreeMap<String, u128>,
    clock: Instant,
}

impl ManifestBuilder {
    fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            input_digests: BTreeMap::new(),
            stages: Vec::new(),
            timing_ms: BTreeMap::new(),
            clock: Instant::now(),
        }
    }

    fn digest_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| AtlasError::io(path, e))?;
        self.input_digests
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn stage(&mut self, name: &str, rows_in: usize, rows_out: usize, drops: usize) {
        self.stages.push(StageRecord {
            name: name.to_string(),
            rows_in,
            rows_out,
            drops,
        });
        self.timing_ms
            .insert(name.to_string(), self.clock.elapsed().as_millis());
        self.clock = Instant::now();
    }

    fn finish(self, pipeline: &Pipeline) -> RunManifest {
        RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: pipeline.config_digest.clone(),
            input_digests: self.input_digests,
            seed: pipeline.seed,
            stages: self.stages,
            timing_ms: self.timing_ms,
        }
    }
}

impl Pipeline {
    pub fn load(
        config_path: &Path,
        out_override: Option<PathBuf>,
        seed_override: Option<u64>,
    ) -> Result<Pipeline> {
        let bytes = std::fs::read(config_path).map_err(|e| AtlasError::io(config_path, e))?;
        let config: PipelineConfig = serde_json::from_slice(&bytes)
            .map_err(|e| AtlasError::parse(config_path, format!("bad config: {e}")))?;
        let config_dir = config_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let seed = seed_override.unwrap_or(config.seed);
        let out_dir = out_override.unwrap_or_else(|| config_dir.join(&config.output_dir));
        Ok(Pipeline {
            config_digest: sha256_hex(&bytes),
            config,
            config_dir,
            out_dir,
            seed,
        })
    }

    /// In-memory constructor used by tests and examples.
    pub fn from_config(config: PipelineConfig, base_dir: &Path, out_dir: &Path) -> Pipeline {
        let digest = sha256_hex(
            serde_json::to_string(&config)
                .expect("config serializes")
                .as_bytes(),
        );
        Pipeline {
            seed: config.seed,
            config,
            config_dir: base_dir.to_path_buf(),
            config_digest: digest,
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.config_dir.join(path)
        }
    }

    fn required<'a, T>(field: &'a Option<T>, name: &str) -> Result<&'a T> {
        field
            .as_ref()
            .ok_or_else(|| AtlasError::Config(format!("config is missing '{name}'")))
    }

    fn prepared_series(&self, manifest: &mut ManifestBuilder) -> Result<(RawSeries, DropLog)> {
        let series_path = self.resolve(Self::required(&self.config.series, "series")?);
        manifest.digest_input(&series_path)?;
        let mut series = io::read_series_csv(&series_path)?;
        let mut drops = DropLog::new();

        if let Some(deflator_path) = &self.config.deflator {
            let deflator_path = self.resolve(deflator_path);
            manifest.digest_input(&deflator_path)?;
            let deflator = io::read_deflator_csv(&deflator_path)?;
            series.deflate_variables(&deflator, &self.config.deflate_variables)?;
        }
        for ratio in &self.config.derived {
            series.derive_ratio(&ratio.name, &ratio.numerator, &ratio.denominator, &mut drops);
        }
        Ok((series, drops))
    }

    pub fn preset(&self, name: &str) -> Result<EstimatePreset> {
        if let Some(p) = self.config.presets.get(name) {
            return Ok(p.clone());
        }
        builtin_presets()
            .remove(name)
            .ok_or_else(|| AtlasError::Config(format!("unknown preset '{name}'")))
    }

    pub fn preset_names(&self) -> Vec<String> {
        let mut names: Vec<String> = builtin_presets().keys().cloned().collect();
        names.extend(self.config.presets.keys().cloned());
        names.sort();
        names.dedup();
        names
    }

    /// Interpolate source-region counts onto the target system.
    pub fn cmd_interpolate(&self) -> Result<RunManifest> {
        let mut manifest = ManifestBuilder::new("interpolate");
        let geometry = Self::required(&self.config.geometry, "geometry")?;
        let counts_path = self.resolve(Self::required(&self.config.counts, "counts")?);
        let source_path = self.resolve(&geometry.source);
        let target_path = self.resolve(&geometry.target);
        let default_points_path = self.resolve(&geometry.points);
        for p in [&source_path, &target_path, &default_points_path, &counts_path] {
            manifest.digest_input(p)?;
        }

        let source =
            io::read_geojson_regions(&source_path, &geometry.id_property, "source", geometry.vintage)?;
        let target =
            io::read_geojson_regions(&target_path, &geometry.id_property, "target", geometry.vintage)?;
        let mut totals = io::read_counts_csv(&counts_path)?;

        // Yearly boundary-change exclusions, applied before any allocation.
        let mut excluded_regions = BTreeMap::new();
        for (&year, year_totals) in totals.iter_mut() {
            let Some(excluded) = geometry.exclusions.get(&year) else {
                continue;
            };
            let mut removed = Vec::new();
            for id in excluded {
                if year_totals.remove(id).is_some() {
                    removed.push(id.clone());
                }
            }
            if !removed.is_empty() {
                excluded_regions.insert(year, removed);
            }
        }

        // Group years by population vintage (points file).
        let mut groups: BTreeMap<PathBuf, Vec<i32>> = BTreeMap::new();
        for &year in totals.keys() {
            let path = geometry
                .per_year_points
                .get(&year)
                .map(|p| self.resolve(p))
                .unwrap_or_else(|| default_points_path.clone());
            groups.entry(path).or_default().push(year);
        }
        if groups.is_empty() {
            groups.insert(default_points_path.clone(), Vec::new());
        }

        let mut by_year = BTreeMap::new();
        let mut diagnostics: Option<interpolate::InterpolationDiagnostics> = None;
        let mut vintage_notes = Vec::new();
        let mut total_points = 0;
        for (points_path, years) in &groups {
            if points_path != &default_points_path {
                manifest.digest_input(points_path)?;
            }
            let points = io::read_points_csv(points_path)?;
            total_points += points.len();
            let subset: BTreeMap<i32, interpolate::SourceTotals> = totals
                .iter()
                .filter(|(year, _)| years.contains(year))
                .map(|(year, t)| (*year, t.clone()))
                .collect();
            let (out, diag) = interpolate::interpolate_counts(&source, &target, &points, &subset)?;
            by_year.extend(out);
            if points_path == &default_points_path {
                diagnostics = Some(diag);
            } else {
                vintage_notes.push(format!(
                    "years {years:?} used population vintage {} ({} points)",
                    points_path.display(),
                    points.len()
                ));
                match &mut diagnostics {
                    Some(base) => base.excluded_mass_share.extend(diag.excluded_mass_share),
                    None => diagnostics = Some(diag),
                }
            }
        }
        let mut diagnostics = diagnostics.expect("at least one group");
        diagnostics.excluded_regions = excluded_regions;
        diagnostics.geometry_warnings = source
            .overlap_diagnostic(8, self.seed)
            .into_iter()
            .chain(source.self_intersection_diagnostic(64, self.seed))
            .chain(target.overlap_diagnostic(8, self.seed))
            .chain(target.self_intersection_diagnostic(64, self.seed))
            .chain(vintage_notes)
            .collect();
        manifest.stage("read-inputs", total_points, total_points, 0);

        let assigned = total_points.saturating_sub(diagnostics.points_outside_target);
        manifest.stage("interpolate", total_points, assigned, diagnostics.points_outside_target);

        io::write_target_totals_csv(&self.out_dir.join("interpolated_counts.csv"), &by_year)?;
        io::write_json(
            &self.out_dir.join("interpolation_diagnostics.json"),
            &diagnostics,
        )?;
        let manifest = manifest.finish(self);
        io::write_json(&self.out_dir.join("manifest_interpolate.json"), &manifest)?;
        Ok(manifest)
    }

    /// Build the estimation panel for a preset and write it for inspection.
    pub fn cmd_panel(&self, preset_name: &str) -> Result<RunManifest> {
        let mut manifest = ManifestBuilder::new("panel");
        let preset = self.preset(preset_name)?;
        let (series, mut drops) = self.prepared_series(&mut manifest)?;
        let built = panel::build_panel(&series, preset.spec())?;
        let cells = series.msas().len() * preset.spec().periods.len();
        manifest.stage("build-panel", cells, built.observations.len(), built.drops.len());
        drops.extend(built.drops.clone());

        io::write_panel_csv(&self.out_dir.join(format!("panel_{preset_name}.csv")), &built)?;
        io::write_drops_csv(&self.out_dir.join(format!("drops_{preset_name}.csv")), &drops)?;
        let manifest = manifest.finish(self);
        io::write_json(
            &self.out_dir.join(format!("manifest_panel_{preset_name}.json")),
            &manifest,
        )?;
        Ok(manifest)
    }

    /// Run one named estimation preset end to end.
    pub fn cmd_estimate(&self, preset_name: &str) -> Result<RunManifest> {
        let mut manifest = ManifestBuilder::new("estimate");
        let preset = self.preset(preset_name)?;
        let out = self.out_dir.join(preset_name);

        match &preset {
            EstimatePreset::Ols { spec, margins } => {
                let (series, mut drops) = self.prepared_series(&mut manifest)?;
                let built = panel::build_panel(&series, spec)?;
                let cells = series.msas().len() * spec.periods.len();
                manifest.stage("build-panel", cells, built.observations.len(), built.drops.len());
                drops.extend(built.drops.clone());

                let design = ols::design_from_panel(&built)?;
                let report = ols::fit_labeled(&design, &spec.label, built.drops.summary())?;
                manifest.stage("fit", report.n, report.k, 0);

                let mut text = report::estimate_table(&report);
                let mut wald = None;
                if let Some(split) = &built.split_name {
                    let test = ols::wald_equal_coefficients(
                        &report,
                        &format!("{split}_plus"),
                        &format!("{split}_minus"),
                    )?;
                    text.push_str(&report::wald_line("plus = minus", &test));
                    wald = Some(test);
                }

                #[derive(Serialize)]
                struct OlsOutput<'a> {
                    report: &'a ols::EstimateReport,
                    split_equality: Option<ols::WaldTest>,
                }
                io::write_json(
                    &out.join("estimate.json"),
                    &OlsOutput {
                        report: &report,
                        split_equality: wald,
                    },
                )?;
                std::fs::create_dir_all(&out).map_err(|e| AtlasError::io(&out, e))?;
                std::fs::write(out.join("estimate.txt"), &text)
                    .map_err(|e| AtlasError::io(out.join("estimate.txt"), e))?;
                io::write_panel_csv(&out.join("panel.csv"), &built)?;
                io::write_drops_csv(&out.join("drops.csv"), &drops)?;

                if let (Some(grid_cfg), Some(split)) = (margins, &built.split_name) {
                    let grid: Vec<f64> = (0..grid_cfg.steps)
                        .map(|i| {
                            grid_cfg.min
                                + (grid_cfg.max - grid_cfg.min) * i as f64
                                    / (grid_cfg.steps.max(2) - 1) as f64
                        })
                        .collect();
                    let curve = ols::margins(
                        &report,
                        &format!("{split}_plus"),
                        &format!("{split}_minus"),
                        &grid,
                        &BTreeMap::new(),
                    )?;
                    io::write_margins_csv(&out.join("margins.csv"), &curve)?;
                }
            }
            EstimatePreset::QuasiDifference {
                spec,
                outcome_scale,
            } => {
                let (series, mut drops) = self.prepared_series(&mut manifest)?;
                let built = panel::build_panel(&series, spec)?;
                let cells = series.msas().len() * spec.periods.len();
                manifest.stage("build-panel", cells, built.observations.len(), built.drops.len());
                drops.extend(built.drops.clone());

                let mut data = qdgmm::qd_data_from_panel(&built)?;
                let label = if *outcome_scale != 1.0 {
                    for pair in &mut data.pairs {
                        pair.y0 *= outcome_scale;
                        pair.y1 *= outcome_scale;
                    }
                    format!("{} [outcome x {outcome_scale}]", spec.label)
                } else {
                    spec.label.clone()
                };
                let init = DVector::zeros(data.k());
                let estimate = qdgmm::fit_qd_labeled(
                    &data,
                    &init,
                    &qdgmm::FitOptions::default(),
                    &label,
                    built.drops.summary(),
                )?;
                manifest.stage("fit", estimate.n, estimate.names.len(), 0);

                io::write_json(&out.join("estimate.json"), &estimate)?;
                std::fs::create_dir_all(&out).map_err(|e| AtlasError::io(&out, e))?;
                std::fs::write(out.join("estimate.txt"), report::qd_table(&estimate))
                    .map_err(|e| AtlasError::io(out.join("estimate.txt"), e))?;
                io::write_panel_csv(&out.join("panel.csv"), &built)?;
                io::write_drops_csv(&out.join("drops.csv"), &drops)?;
            }
            EstimatePreset::Iv(iv) => {
                self.run_iv(iv, &out, &mut manifest)?;
            }
        }

        let manifest = manifest.finish(self);
        io::write_json(&out.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    fn run_iv(&self, iv: &IvPreset, out: &Path, manifest: &mut ManifestBuilder) -> Result<()> {
        if iv.spec.split.is_none() {
            return Err(AtlasError::Config(format!(
                "IV preset '{}' needs a split variable",
                iv.spec.label
            )));
        }
        let (series, mut drops) = self.prepared_series(manifest)?;

        // Employment rides along as the last covariate, then moves to the
        // endogenous block.
        let mut spec = iv.spec.clone();
        spec.covariates.push(VariableSpec {
            name: iv.employment.clone(),
            transform: Transform::Log,
        });
        let built = panel::build_panel(&series, &spec)?;
        let cells = series.msas().len() * spec.periods.len();
        manifest.stage("build-panel", cells, built.observations.len(), built.drops.len());
        drops.extend(built.drops.clone());

        let instruments = self.build_instrument_set(&spec, &series, manifest, &mut drops)?;
        let (design, iv_drops) = assemble_iv_design(&built, &instruments, iv.employment_mode)?;
        manifest.stage(
            "align-instruments",
            built.observations.len(),
            design.n(),
            iv_drops.len(),
        );
        drops.extend(iv_drops);

        let stages = shiftshare::first_stages(&design)?;
        let report = shiftshare::fit_iv(&design, &iv.spec.label)?;
        let hansen = shiftshare::hansen_j(&design, &report)?;
        let loo = shiftshare::leave_one_out(&design, &iv.spec.label)?;
        manifest.stage("fit-iv", design.n(), report.k, 0);

        let mut text = report::estimate_table(&report);
        text.push_str(&report::hansen_line(&hansen));
        text.push('\n');
        text.push_str(&report::first_stage_table(&stages));

        #[derive(Serialize)]
        struct IvOutput<'a> {
            report: &'a ols::EstimateReport,
            hansen_j: &'a shiftshare::HansenJ,
            first_stages: &'a [shiftshare::FirstStage],
            leave_one_out: &'a [(String, ols::EstimateReport)],
        }
        io::write_json(
            &out.join("estimate.json"),
            &IvOutput {
                report: &report,
                hansen_j: &hansen,
                first_stages: &stages,
                leave_one_out: &loo,
            },
        )?;
        std::fs::create_dir_all(out).map_err(|e| AtlasError::io(out, e))?;
        std::fs::write(out.join("estimate.txt"), &text)
            .map_err(|e| AtlasError::io(out.join("estimate.txt"), e))?;
        for (dropped, loo_report) in &loo {
            std::fs::write(
                out.join(format!("loo_drop_{dropped}.txt")),
                report::estimate_table(loo_report),
            )
            .map_err(|e| AtlasError::io(out, std::io::Error::other(e)))?;
        }
        io::write_panel_csv(&out.join("panel.csv"), &built)?;
        io::write_drops_csv(&out.join("drops.csv"), &drops)?;
        Ok(())
    }

    fn build_instrument_set(
        &self,
        spec: &SpecConfig,
        series: &RawSeries,
        manifest: &mut ManifestBuilder,
        drops: &mut DropLog,
    ) -> Result<InstrumentSet> {
        let shares_path = self.resolve(Self::required(
            &self.config.industry_shares,
            "industry_shares",
        )?);
        let growth_path = self.resolve(Self::required(
            &self.config.national_growth,
            "national_growth",
        )?);
        let eta_path = self.resolve(Self::required(&self.config.eta, "eta")?);
        for p in [&shares_path, &growth_path, &eta_path] {
            manifest.digest_input(p)?;
        }
        let shares = io::read_industry_shares_csv(&shares_path)?;
        let growth_by_year = io::read_national_growth_csv(&growth_path)?;
        let eta = io::read_eta_csv(&eta_path)?;

        let mut bartik_values = BTreeMap::new();
        for &(t0, t1) in &spec.periods {
            let period = format!("{t0}-{t1}");
            let growth = growth_by_year.get(&t0).ok_or_else(|| {
                AtlasError::Config(format!("no national growth rates for period start {t0}"))
            })?;
            for msa in series.msas() {
                match shares.row(&msa, t0) {
                    Some(row) => {
                        let b = shiftshare::bartik(row, growth)?;
                        bartik_values.insert((msa.clone(), period.clone()), b);
                    }
                    None => drops.push(msa, period.clone(), format!("no industry shares for {t0}")),
                }
            }
        }
        let (set, eta_drops) = shiftshare::build_instruments(&bartik_values, &eta);
        drops.extend(eta_drops);
        Ok(set)
    }

    /// Simulate the market and write the per-period series plus the
    /// asymmetry report; optionally run the ensemble bridge.
    pub fn cmd_simulate(&self) -> Result<RunManifest> {
        let mut manifest = ManifestBuilder::new("simulate");
        let mut market_config = self
            .config
            .market
            .clone()
            .unwrap_or_else(|| MarketConfig::default_market(self.seed));
        market_config.seed = self.seed;
        let sim_config = self.config.simulate.clone().unwrap_or_default();

        let sim = market::simulate(
            &market_config,
            &sim_config.shocks,
            sim_config.t_max,
            sim_config.shift_fraction,
        )?;
        manifest.stage("simulate", market_config.n_agents, sim.periods.len(), 0);

        io::write_market_csv(&self.out_dir.join("market_periods.csv"), &sim.periods)?;
        io::write_json(&self.out_dir.join("asymmetry.json"), &sim.asymmetry)?;

        if sim_config.run_bridge {
            let mut bridge_config = self
                .config
                .bridge
                .clone()
                .unwrap_or_else(|| BridgeConfig::default_bridge(self.seed));
            bridge_config.seed = self.seed;
            let (bridge_panel, bridge_report) = market::run_bridge(&bridge_config)?;
            manifest.stage(
                "bridge",
                bridge_config.n_markets,
                bridge_panel.observations.len(),
                bridge_panel.drops.len(),
            );
            io::write_panel_csv(&self.out_dir.join("bridge_panel.csv"), &bridge_panel)?;
            io::write_json(&self.out_dir.join("bridge_estimate.json"), &bridge_report)?;
            std::fs::write(
                self.out_dir.join("bridge_estimate.txt"),
                report::estimate_table(&bridge_report),
            )
            .map_err(|e| AtlasError::io(self.out_dir.join("bridge_estimate.txt"), e))?;
        }

        let manifest = manifest.finish(self);
        io::write_json(&self.out_dir.join("manifest_simulate.json"), &manifest)?;
        Ok(manifest)
    }

    /// Per-year correlations between two variables (raw and logged) plus
    /// the per-year means table.
    pub fn cmd_validate(&self) -> Result<RunManifest> {
        let mut manifest = ManifestBuilder::new("validate");
        let validate = self.config.validate.clone().unwrap_or_default();
        let (series, _) = self.prepared_series(&mut manifest)?;

        let mut rows = Vec::new();
        for year in series.years() {
            let xs = series.variable_values(&validate.x_variable, year);
            let lookup: BTreeMap<&str, f64> =
                xs.iter().map(|(m, v)| (m.as_str(), *v)).collect();
            let mut x = Vec::new();
            let mut y = Vec::new();
            for (msa, y_val) in series.variable_values(&validate.y_variable, year) {
                if let Some(&x_val) = lookup.get(msa.as_str()) {
                    x.push(x_val);
                    y.push(y_val);
                }
            }
            if x.len() < 3 {
                continue;
            }
            let raw = panel::correlation_test(&x, &y)?;
            let log_of = |v: f64| if v > 0.0 { v.ln() } else { f64::NAN };
            let lx: Vec<f64> = x.iter().map(|v| log_of(*v)).collect();
            let ly: Vec<f64> = y.iter().map(|v| log_of(*v)).collect();
            let logged = panel::correlation_test(&lx, &ly)?;
            rows.push((year, raw, logged));
        }
        if rows.is_empty() {
            return Err(AtlasError::InvalidInput(
                "no year had at least 3 joint observations for the validation pair".into(),
            ));
        }
        manifest.stage("correlations", series.years().len(), rows.len(), 0);

        let summaries = panel::summary_stats(
            &series,
            &[validate.x_variable.clone(), validate.y_variable.clone()],
        );
        let mut text = report::correlation_table(&rows);
        text.push('\n');
        text.push_str(&report::summary_table(&summaries));

        #[derive(Serialize)]
        struct ValidationOutput<'a> {
            correlations: Vec<ValidationRow<'a>>,
            summaries: &'a [panel::YearSummary],
        }
        #[derive(Serialize)]
        struct ValidationRow<'a> {
            year: i32,
            raw_r: f64,
            raw_p: f64,
            raw_stars: &'a str,
            log_r: f64,
            log_p: f64,
            log_stars: &'a str,
            n: usize,
        }
        let json_rows: Vec<ValidationRow> = rows
            .iter()
            .map(|(year, raw, logged)| ValidationRow {
                year: *year,
                raw_r: raw.r,
                raw_p: raw.p_value,
                raw_stars: raw.stars,
                log_r: logged.r,
                log_p: logged.p_value,
                log_stars: logged.stars,
                n: raw.n,
            })
            .collect();
        io::write_json(
            &self.out_dir.join("validation.json"),
            &ValidationOutput {
                correlations: json_rows,
                summaries: &summaries,
            },
        )?;
        std::fs::create_dir_all(&self.out_dir).map_err(|e| AtlasError::io(&self.out_dir, e))?;
        std::fs::write(self.out_dir.join("validation.txt"), &text)
            .map_err(|e| AtlasError::io(self.out_dir.join("validation.txt"), e))?;

        let manifest = manifest.finish(self);
        io::write_json(&self.out_dir.join("manifest_validate.json"), &manifest)?;
        Ok(manifest)
    }
}

/// Split a panel whose last covariate is the employment change into the IV
/// design: endogenous block `[split_plus, split_minus, d_employment]` (or
/// just the split terms in predicted-exogenous mode), exogenous block
/// `[intercept, other covariates, period dummies]`, instruments from the
/// per-(msa, period) instrument set. Rows without instruments are dropped
/// and logged.
pub fn assemble_iv_design(
    built: &Panel,
    instruments: &InstrumentSet,
    mode: EmploymentMode,
) -> Result<(IVDesign, DropLog)> {
    let split = built
        .split_name
        .as_ref()
        .ok_or_else(|| AtlasError::Config("IV panel needs a split variable".into()))?;
    if built.covariate_names.is_empty() {
        return Err(AtlasError::Config(
            "IV panel needs the employment covariate".into(),
        ));
    }
    let employment_name = built
        .covariate_names
        .last()
        .expect("nonempty checked")
        .clone();
    let other_covs = built.covariate_names.len() - 1;

    let mut drops = DropLog::new();
    let kept: Vec<(&panel::PanelObservation, &[f64; 4])> = built
        .observations
        .iter()
        .filter_map(|obs| match instruments.get(&obs.msa, &obs.period) {
            Some(row) => Some((obs, row)),
            None => {
                drops.push(obs.msa.clone(), obs.period.clone(), "no instrument row");
                None
            }
        })
        .collect();
    let n = kept.len();
    if n == 0 {
        return Err(AtlasError::InvalidInput(
            "no observations with instruments".into(),
        ));
    }

    let n_dummies = built.period_labels.len().saturating_sub(1);
    let (n_endog, n_excluded) = match mode {
        EmploymentMode::Endogenous => (3, 4),
        EmploymentMode::PredictedExogenous => (2, 3),
    };
    let n_exog = 1 + other_covs
        + n_dummies
        + match mode {
            EmploymentMode::Endogenous => 0,
            // Plain predicted growth becomes a control...
            EmploymentMode::PredictedExogenous => 1,
        };

    let mut y = DVector::zeros(n);
    let mut endogenous = DMatrix::zeros(n, n_endog);
    let mut exogenous = DMatrix::zeros(n, n_exog);
    let mut instrument_matrix = DMatrix::zeros(n, n_excluded);
    let mut clusters = Vec::with_capacity(n);

    for (i, (obs, inst)) in kept.iter().enumerate() {
        y[i] = obs.outcome;
        endogenous[(i, 0)] = obs.split_plus;
        endogenous[(i, 1)] = obs.split_minus;
        let mut col = 0;
        exogenous[(i, col)] = 1.0;
        col += 1;
        for &c in obs.covariates.iter().take(other_covs) {
            exogenous[(i, col)] = c;
            col += 1;
        }
        for &d in &obs.period_dummies {
            exogenous[(i, col)] = d;
            col += 1;
        }
        match mode {
            EmploymentMode::Endogenous => {
                endogenous[(i, 2)] = obs.covariates[other_covs];
                for j in 0..4 {
                    instrument_matrix[(i, j)] = inst[j];
                }
            }
            EmploymentMode::PredictedExogenous => {
                // ...and the interactions stay excluded.
                exogenous[(i, col)] = inst[0];
                for j in 0..3 {
                    instrument_matrix[(i, j)] = inst[j + 1];
                }
            }
        }
        clusters.push(obs.cluster.clone());
    }

    let mut endogenous_names = vec![format!("{split}_plus"), format!("{split}_minus")];
    let mut exogenous_names = vec!["intercept".to_string()];
    exogenous_names.extend(
        built
            .covariate_names
            .iter()
            .take(other_covs)
            .map(|c| format!("d_{c}")),
    );
    exogenous_names.extend(
        built
            .period_labels
            .iter()
            .skip(1)
            .map(|l| format!("period_{l}")),
    );
    let instrument_names = match mode {
        EmploymentMode::Endogenous => {
            endogenous_names.push(format!("d_{employment_name}"));
            shiftshare::INSTRUMENT_LABELS
                .iter()
                .map(|s| s.to_string())
                .collect()
        }
        EmploymentMode::PredictedExogenous => {
            exogenous_names.push("bartik".to_string());
            shiftshare::INSTRUMENT_LABELS[1..]
                .iter()
                .map(|s| s.to_string())
                .collect()
        }
    };

    Ok((
        IVDesign {
            y,
            endogenous,
            exogenous,
            instruments: instrument_matrix,
            clusters,
            endogenous_names,
            exogenous_names,
            instrument_names,
        },
        drops,
    ))
}
