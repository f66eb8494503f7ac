//! Campaign configuration: factor declarations, objective, and the
//! per-phase parameters, loaded from a JSON file and validated with
//! field-precise messages.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::doe::FactorSpec;
use crate::error::{Error, Result};
use crate::objective::ObjectiveSpec;

fn default_one() -> usize {
    1
}

fn default_four() -> usize {
    4
}

fn default_steps() -> usize {
    10
}

fn default_p_threshold() -> f64 {
    0.5
}

fn default_replicates() -> usize {
    3
}

/// Screening phase: replicated two-level factorial plus center points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreeningParams {
    /// Replicates per factorial corner.
    #[serde(default = "default_one")]
    pub n_c: usize,
    /// Center-point replicates (n_0 of the screening phase).
    #[serde(default = "default_four")]
    pub n_center: usize,
}

impl Default for ScreeningParams {
    fn default() -> Self {
        ScreeningParams { n_c: 1, n_center: 4 }
    }
}

/// Steepest-descent phase: step lengths default to t = −1, −2, …, −steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescentParams {
    #[serde(default = "default_steps")]
    pub steps: usize,
}

impl Default for DescentParams {
    fn default() -> Self {
        DescentParams { steps: 10 }
    }
}

/// Screening-significance drop rule: factors whose p-value exceeds the
/// threshold (strictly) are dropped and held at their mid levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropParams {
    #[serde(default = "default_p_threshold")]
    pub p_threshold: f64,
}

impl Default for DropParams {
    fn default() -> Self {
        DropParams { p_threshold: 0.5 }
    }
}

/// A fractional-factorial defining relation written with factor names;
/// resolved against the active factors when the CCD is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedGenerator {
    pub target: String,
    pub product: Vec<String>,
    #[serde(default)]
    pub negate: bool,
}

/// Resolves name-based generators to index-based ones against an
/// ordered factor-name list.
pub fn resolve_generators(
    names: &[String],
    generators: &[NamedGenerator],
) -> Result<Vec<crate::doe::Generator>> {
    let lookup = |n: &String| {
        names.iter().position(|a| a == n).ok_or_else(|| {
            Error::InvalidGenerators(format!("`{n}` does not name a design factor"))
        })
    };
    generators
        .iter()
        .map(|g| {
            Ok(crate::doe::Generator {
                target: lookup(&g.target)?,
                product: g.product.iter().map(lookup).collect::<Result<Vec<_>>>()?,
                negate: g.negate,
            })
        })
        .collect()
}

/// Second-order phase: the central composite design around the
/// re-centered domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CcdParams {
    /// Replicates per factorial corner.
    #[serde(default = "default_one")]
    pub n_c: usize,
    /// Replicates per star point.
    #[serde(default = "default_one")]
    pub n_s: usize,
    /// Center-point replicates (n_0 of the CCD phase).
    #[serde(default = "default_four")]
    pub n_center: usize,
    /// Star distance; omitted means the rotatable default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Per-factor half-widths d for the re-centered domain
    /// [center − d, center + d]; unlisted factors get the default
    /// (half the current coding half-width, floored to 1 for
    /// integer-valued kinds).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub half_widths: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generators: Vec<NamedGenerator>,
}

impl Default for CcdParams {
    fn default() -> Self {
        CcdParams {
            n_c: 1,
            n_s: 1,
            n_center: 4,
            alpha: None,
            half_widths: BTreeMap::new(),
            generators: Vec::new(),
        }
    }
}

/// Confirmation phase: replicate count at the stationary point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfirmParams {
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

impl Default for ConfirmParams {
    fn default() -> Self {
        ConfirmParams { replicates: 3 }
    }
}

/// Everything a campaign needs, apart from the losses themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub factors: Vec<FactorSpec>,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub screening: ScreeningParams,
    #[serde(default)]
    pub descent: DescentParams,
    #[serde(default)]
    pub drop: DropParams,
    #[serde(default)]
    pub ccd: CcdParams,
    #[serde(default)]
    pub confirm: ConfirmParams,
    #[serde(default = "default_one")]
    pub jobs: usize,
    /// When set, `run` advances through every phase with the default
    /// rules instead of pausing for operator commands.
    #[serde(default)]
    pub autopilot: bool,
}

/// Ledger column labels that factor names must not shadow.
const RESERVED_COLUMNS: [&str; 6] = ["run_id", "phase", "role", "replicate", "loss", "timestamp"];

impl Config {
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig {
            field: path.display().to_string(),
            reason: format!("cannot read config: {e}"),
        })?;
        let config: Config = serde_json::from_str(&text).map_err(|e| Error::InvalidConfig {
            field: path.display().to_string(),
            reason: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::InvalidConfig {
                field: field.to_string(),
                reason,
            })
        };
        if self.factors.is_empty() {
            return bad("factors", "at least one factor is required".into());
        }
        for (i, factor) in self.factors.iter().enumerate() {
            factor.validate()?;
            let name = &factor.name;
            if !name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
            {
                return bad(
                    &format!("factors[{i}].name"),
                    format!("`{name}` may only contain [A-Za-z0-9_.-] (it becomes a CSV column)"),
                );
            }
            if RESERVED_COLUMNS.contains(&name.as_str()) {
                return bad(
                    &format!("factors[{i}].name"),
                    format!("`{name}` collides with a ledger column"),
                );
            }
            if name.ends_with("_coded") {
                return bad(
                    &format!("factors[{i}].name"),
                    format!("`{name}` collides with the coded-column naming scheme"),
                );
            }
            if self.factors[..i].iter().any(|f| f.name == *name) {
                return bad(&format!("factors[{i}].name"), format!("duplicate factor `{name}`"));
            }
        }
        self.objective.validate(self.factors.len())?;
        if self.screening.n_c == 0 {
            return bad("screening.n_c", "must be >= 1".into());
        }
        if self.descent.steps == 0 {
            return bad("descent.steps", "must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.drop.p_threshold) {
            return bad("drop.p_threshold", "must lie in [0, 1]".into());
        }
        if self.ccd.n_c == 0 || self.ccd.n_s == 0 {
            return bad("ccd.n_c/n_s", "replicate counts must be >= 1".into());
        }
        if let Some(alpha) = self.ccd.alpha {
            if !(alpha.is_finite() && alpha > 0.0) {
                return bad("ccd.alpha", format!("must be a positive real, got {alpha}"));
            }
        }
        for (name, d) in &self.ccd.half_widths {
            if !self.factors.iter().any(|f| f.name == *name) {
                return bad(
                    "ccd.half_widths",
                    format!("`{name}` does not name a declared factor"),
                );
            }
            if !(d.is_finite() && *d > 0.0) {
                return bad(
                    "ccd.half_widths",
                    format!("half-width for `{name}` must be positive, got {d}"),
                );
            }
        }
        for (gi, g) in self.ccd.generators.iter().enumerate() {
            for name in std::iter::once(&g.target).chain(&g.product) {
                if !self.factors.iter().any(|f| f.name == *name) {
                    return bad(
                        &format!("ccd.generators[{gi}]"),
                        format!("`{name}` does not name a declared factor"),
                    );
                }
            }
        }
        if self.jobs == 0 {
            return bad("jobs", "must be >= 1".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical (compact JSON) form, pinning a
    /// campaign directory to the config that created it.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_string(self).expect("config always serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn factor_names(&self) -> Vec<String> {
        self.factors.iter().map(|f| f.name.clone()).collect()
    }
}
