//! Factor coding and experimental-design generation.
//!
//! A `FactorSpec` maps a hyperparameter's natural units onto the coded
//! interval [−1, +1]; designs (full factorial, fractional factorial,
//! central composite) are generated in coded units and decoded back per
//! factor kind. The D-criterion compares rival designs by the
//! determinant of the inverse information matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::regress::{self, ModelOrder};

/// Nearest integer, ties rounded away from zero.
pub fn nint(x: f64) -> i64 {
    x.round() as i64
}

/// What a factor's decoded values are: arbitrary reals, integers, or
/// integer labels on a ring of `modulus` levels (index arithmetic wraps).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Continuous,
    Integer,
    Cyclic { modulus: i64 },
}

/// How a decoded value that escapes its valid range is repaired.
/// Only cyclic factors ever trigger repair: continuous and plain integer
/// factors pass out-of-range values through so star points and descent
/// steps can explore beyond the current box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OobPolicy {
    /// Snap to the nearer of the current low/high bounds.
    Clamp,
    /// Reduce modulo the ring size so the label stays in [0, modulus−1].
    Wrap,
}

/// A decoded factor setting in natural units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DecodedValue {
    Int(i64),
    Real(f64),
}

impl DecodedValue {
    pub fn as_f64(&self) -> f64 {
        match *self {
            DecodedValue::Int(n) => n as f64,
            DecodedValue::Real(v) => v,
        }
    }
}

impl std::fmt::Display for DecodedValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            DecodedValue::Int(n) => write!(f, "{n}"),
            DecodedValue::Real(v) => write!(f, "{v}"),
        }
    }
}

/// A fully decoded run setting: (factor name, value) pairs in declared
/// factor order — held factors included.
pub type DecodedSettings = Vec<(String, DecodedValue)>;

/// One hyperparameter: its natural-unit domain and coding constants.
///
/// Coding maps `low → −1`, `high → +1`, and the domain midpoint `m` to 0.
/// `mid` is distinct from `m`: it is the level a factor is held at when
/// it has been dropped from the active set, and defaults to `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub name: String,
    pub kind: FactorKind,
    pub low: f64,
    pub high: f64,
    /// Held level for a dropped factor; defaults to the domain midpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mid: Option<f64>,
    /// Out-of-bound repair for cyclic factors; defaults to wrap for
    /// cyclic kinds and is unused otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oob_policy: Option<OobPolicy>,
}

impl FactorSpec {
    pub fn new(name: &str, kind: FactorKind, low: f64, high: f64) -> Result<Self> {
        let spec = FactorSpec {
            name: name.to_string(),
            kind,
            low,
            high,
            mid: None,
            oob_policy: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_mid(mut self, mid: f64) -> Result<Self> {
        self.mid = Some(mid);
        self.validate()?;
        Ok(self)
    }

    pub fn with_policy(mut self, policy: OobPolicy) -> Result<Self> {
        self.oob_policy = Some(policy);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidFactor {
                name: self.name.clone(),
                reason,
            })
        };
        if self.name.is_empty() {
            return Err(Error::InvalidFactor {
                name: "<unnamed>".into(),
                reason: "factor name must be non-empty".into(),
            });
        }
        if !(self.low.is_finite() && self.high.is_finite()) {
            return fail("bounds must be finite".into());
        }
        if self.low >= self.high {
            return fail(format!("low {} must be < high {}", self.low, self.high));
        }
        match self.kind {
            FactorKind::Continuous => {}
            FactorKind::Integer | FactorKind::Cyclic { .. } => {
                if self.low.fract() != 0.0 || self.high.fract() != 0.0 {
                    return fail(format!(
                        "integer-valued factor needs integer bounds, got [{}, {}]",
                        self.low, self.high
                    ));
                }
            }
        }
        if let FactorKind::Cyclic { modulus } = self.kind {
            if modulus < 1 {
                return fail(format!("cyclic modulus must be >= 1, got {modulus}"));
            }
        }
        if let Some(mid) = self.mid {
            if !(self.low <= mid && mid <= self.high) {
                return fail(format!(
                    "mid {} must lie within [{}, {}]",
                    mid, self.low, self.high
                ));
            }
        }
        if self.oob_policy == Some(OobPolicy::Wrap) && !matches!(self.kind, FactorKind::Cyclic { .. })
        {
            return fail("wrap policy is only legal for cyclic factors".into());
        }
        Ok(())
    }

    /// Coding center: (high + low) / 2.
    pub fn m(&self) -> f64 {
        (self.high + self.low) / 2.0
    }

    /// Coding half-width: (high − low) / 2.
    pub fn s(&self) -> f64 {
        (self.high - self.low) / 2.0
    }

    /// Held level for a dropped factor.
    pub fn mid_level(&self) -> f64 {
        self.mid.unwrap_or_else(|| self.m())
    }

    pub fn policy(&self) -> OobPolicy {
        self.oob_policy.unwrap_or(match self.kind {
            FactorKind::Cyclic { .. } => OobPolicy::Wrap,
            _ => OobPolicy::Clamp,
        })
    }

    /// Natural units → coded. The anchors low/m/high map to −1/0/+1
    /// exactly (bypassing fp rounding in the general formula); values
    /// outside [low, high] yield |coded| > 1, which is allowed.
    pub fn encode(&self, actual: f64) -> f64 {
        if actual == self.low {
            -1.0
        } else if actual == self.high {
            1.0
        } else if actual == self.m() {
            0.0
        } else {
            (actual - self.m()) / self.s()
        }
    }

    /// Coded → natural units, applying the kind's rounding and (for
    /// cyclic factors) the out-of-bound repair policy.
    pub fn decode(&self, coded: f64) -> DecodedValue {
        let raw = if coded == -1.0 {
            self.low
        } else if coded == 1.0 {
            self.high
        } else if coded == 0.0 {
            self.m()
        } else {
            coded * self.s() + self.m()
        };
        match self.kind {
            FactorKind::Continuous => DecodedValue::Real(raw),
            FactorKind::Integer => DecodedValue::Int(nint(raw)),
            FactorKind::Cyclic { modulus } => {
                let n = nint(raw);
                let repaired = match self.policy() {
                    OobPolicy::Wrap => {
                        if n < 0 || n >= modulus {
                            n.rem_euclid(modulus)
                        } else {
                            n
                        }
                    }
                    OobPolicy::Clamp => {
                        if (n as f64) < self.low {
                            self.low as i64
                        } else if (n as f64) > self.high {
                            self.high as i64
                        } else {
                            n
                        }
                    }
                };
                DecodedValue::Int(repaired)
            }
        }
    }
}

/// Role of a design point within the campaign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointRole {
    Corner,
    Center,
    Star,
    Descent,
    Confirmation,
}

impl std::fmt::Display for PointRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PointRole::Corner => "corner",
            PointRole::Center => "center",
            PointRole::Star => "star",
            PointRole::Descent => "descent",
            PointRole::Confirmation => "confirmation",
        };
        f.write_str(s)
    }
}

/// One coded design point plus its role tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub coded: Vec<f64>,
    pub role: PointRole,
}

/// An ordered list of coded design points over `p` active factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    p: usize,
    points: Vec<DesignPoint>,
}

impl Design {
    pub fn new(p: usize) -> Self {
        Design {
            p,
            points: Vec::new(),
        }
    }

    pub fn from_points(p: usize, points: Vec<DesignPoint>) -> Result<Self> {
        for pt in &points {
            if pt.coded.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: pt.coded.len(),
                });
            }
        }
        Ok(Design { p, points })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DesignPoint] {
        &self.points
    }

    pub fn push(&mut self, coded: Vec<f64>, role: PointRole) {
        assert_eq!(coded.len(), self.p, "design point has wrong dimension");
        self.points.push(DesignPoint { coded, role });
    }
}

/// Defining relation for a fractional factorial: column `target` is the
/// product of the `product` base columns, optionally negated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generator {
    pub target: usize,
    pub product: Vec<usize>,
    #[serde(default)]
    pub negate: bool,
}

/// Central-composite design parameters. `f` is implied by the generator
/// list; `alpha = None` selects the rotatable default
/// (2^{p−f}·n_c / n_s)^{1/4}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcdSpec {
    pub p: usize,
    pub n_c: usize,
    pub n_s: usize,
    pub n_0: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generators: Vec<Generator>,
}

impl CcdSpec {
    pub fn f(&self) -> usize {
        self.generators.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidDesign("factor count must be >= 1".into()));
        }
        if self.n_c == 0 || self.n_s == 0 {
            return Err(Error::InvalidDesign(
                "corner and star replicate counts must be >= 1".into(),
            ));
        }
        if let Some(a) = self.alpha {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::InvalidDesign(format!(
                    "alpha must be a positive real, got {a}"
                )));
            }
        }
        validate_generators(self.p, &self.generators)?;
        Ok(())
    }

    /// Star distance that makes the design rotatable:
    /// (2^{p−f}·n_c / n_s)^{1/4}.
    pub fn rotatable_alpha(&self) -> f64 {
        let corners = (1u64 << (self.p - self.f())) as f64;
        (corners * self.n_c as f64 / self.n_s as f64).powf(0.25)
    }

    pub fn resolved_alpha(&self) -> f64 {
        self.alpha.unwrap_or_else(|| self.rotatable_alpha())
    }

    /// 2^{p−f}·n_c + 2p·n_s + n_0.
    pub fn total_runs(&self) -> usize {
        (1usize << (self.p - self.f())) * self.n_c + 2 * self.p * self.n_s + self.n_0
    }
}

/// All 2^p sign combinations over p factors, last factor varying
/// fastest, every point tagged as a corner.
pub fn full_factorial(p: usize) -> Result<Design> {
    if p == 0 {
        return Err(Error::InvalidDesign(
            "full factorial needs at least one factor".into(),
        ));
    }
    if p > 24 {
        return Err(Error::InvalidDesign(format!(
            "refusing to enumerate 2^{p} corners"
        )));
    }
    let mut design = Design::new(p);
    for idx in 0..(1usize << p) {
        let mut coded = vec![0.0; p];
        for (j, c) in coded.iter_mut().enumerate() {
            // bit p−1−j so the last factor flips fastest
            *c = if idx >> (p - 1 - j) & 1 == 1 { 1.0 } else { -1.0 };
        }
        design.push(coded, PointRole::Corner);
    }
    Ok(design)
}

fn validate_generators(p: usize, generators: &[Generator]) -> Result<()> {
    let f = generators.len();
    if f >= p {
        return Err(Error::InvalidGenerators(format!(
            "{f} generators over {p} factors leave no base factors"
        )));
    }
    let targets: Vec<usize> = generators.iter().map(|g| g.target).collect();
    for g in generators {
        if g.target >= p {
            return Err(Error::InvalidGenerators(format!(
                "generator target index {} out of range for {p} factors",
                g.target
            )));
        }
        if g.product.is_empty() {
            return Err(Error::InvalidGenerators(format!(
                "generator for factor {} has an empty product",
                g.target
            )));
        }
        let mut seen = Vec::new();
        for &b in &g.product {
            if b >= p {
                return Err(Error::InvalidGenerators(format!(
                    "generator product index {b} out of range for {p} factors"
                )));
            }
            if targets.contains(&b) {
                return Err(Error::InvalidGenerators(format!(
                    "generator for factor {} depends on generated factor {b}",
                    g.target
                )));
            }
            if seen.contains(&b) {
                return Err(Error::InvalidGenerators(format!(
                    "generator for factor {} repeats base factor {b}",
                    g.target
                )));
            }
            seen.push(b);
        }
    }
    // distinct targets, and no two generators sharing one product set
    // (identical or negated copies alias their target columns)
    for (i, gi) in generators.iter().enumerate() {
        for gj in &generators[i + 1..] {
            if gi.target == gj.target {
                return Err(Error::InvalidGenerators(format!(
                    "factor {} has two defining relations",
                    gi.target
                )));
            }
            let mut a = gi.product.clone();
            let mut b = gj.product.clone();
            a.sort_unstable();
            b.sort_unstable();
            if a == b {
                return Err(Error::InvalidGenerators(format!(
                    "generators for factors {} and {} share one product; their columns would alias",
                    gi.target, gj.target
                )));
            }
        }
    }
    Ok(())
}

/// 2^{p−f} corner points satisfying every defining relation exactly.
/// With no generators this is the full factorial.
pub fn fractional_factorial(p: usize, generators: &[Generator]) -> Result<Design> {
    if p == 0 {
        return Err(Error::InvalidDesign(
            "fractional factorial needs at least one factor".into(),
        ));
    }
    validate_generators(p, generators)?;
    let targets: Vec<usize> = generators.iter().map(|g| g.target).collect();
    let base: Vec<usize> = (0..p).filter(|j| !targets.contains(j)).collect();
    let mut design = Design::new(p);
    for idx in 0..(1usize << base.len()) {
        let mut coded = vec![0.0; p];
        for (pos, &j) in base.iter().enumerate() {
            // last base factor flips fastest, mirroring full_factorial
            coded[j] = if idx >> (base.len() - 1 - pos) & 1 == 1 {
                1.0
            } else {
                -1.0
            };
        }
        for g in generators {
            let mut v = if g.negate { -1.0 } else { 1.0 };
            for &b in &g.product {
                v *= coded[b];
            }
            coded[g.target] = v;
        }
        design.push(coded, PointRole::Corner);
    }
    Ok(design)
}

/// Central composite design: replicated corners, then per factor the
/// +α and −α star points (replicated), then the center points.
pub fn ccd(spec: &CcdSpec) -> Result<Design> {
    spec.validate()?;
    let alpha = spec.resolved_alpha();
    let corners = fractional_factorial(spec.p, &spec.generators)?;
    let mut design = Design::new(spec.p);
    for pt in corners.points() {
        for _ in 0..spec.n_c {
            design.push(pt.coded.clone(), PointRole::Corner);
        }
    }
    for j in 0..spec.p {
        for sign in [1.0, -1.0] {
            for _ in 0..spec.n_s {
                let mut coded = vec![0.0; spec.p];
                coded[j] = sign * alpha;
                design.push(coded, PointRole::Star);
            }
        }
    }
    for _ in 0..spec.n_0 {
        design.push(vec![0.0; spec.p], PointRole::Center);
    }
    debug_assert_eq!(design.len(), spec.total_runs());
    Ok(design)
}

/// The design as it will actually be run: decode every coordinate per
/// its factor's rules (rounding, wrap/clamp), then re-encode the decoded
/// value. The result is the honest model matrix for D-comparison and for
/// the run ledger — e.g. a clamped star at 6 re-encodes to +1, a wrapped
/// star at 1 re-encodes to −4 when m=5, s=1.
pub fn realized_design(design: &Design, factors: &[FactorSpec]) -> Result<Design> {
    if design.p() != factors.len() {
        return Err(Error::DimensionMismatch {
            expected: design.p(),
            got: factors.len(),
        });
    }
    let mut out = Design::new(design.p());
    for pt in design.points() {
        let coded: Vec<f64> = pt
            .coded
            .iter()
            .zip(factors)
            .map(|(&c, f)| f.encode(f.decode(c).as_f64()))
            .collect();
        out.push(coded, pt.role);
    }
    Ok(out)
}

/// D-criterion of a design for a given model order:
/// det((XᵀX)⁻¹). Smaller is better (tighter joint confidence region).
pub fn d_criterion(design: &Design, order: ModelOrder) -> Result<f64> {
    if design.is_empty() {
        return Err(Error::InvalidDesign(
            "cannot score an empty design".into(),
        ));
    }
    let x = regress::model_matrix(design, order);
    if x.rows() < x.cols() {
        return Err(Error::Underdetermined {
            rows: x.rows(),
            cols: x.cols(),
        });
    }
    match linalg::cholesky(&x.gram()) {
        Ok(ch) => Ok((-ch.log_det()).exp()),
        Err(_) => {
            // pin down which model columns are (near-)collinear
            let names = regress::term_names_generic(design.p(), order);
            let bad = linalg::householder_qr(&x).near_null_columns(1e-10);
            Err(Error::RankDeficient {
                columns: bad.into_iter().map(|j| names[j].clone()).collect(),
            })
        }
    }
}
