//! Black-box objective interface: a built-in analytic quadratic surface
//! (with optional reproducible noise) for testing and demos, an
//! external-command protocol for real trainers, and the Poisson
//! deviance metric for count models.
//!
//! External protocol (line-oriented, UTF-8):
//!   → child stdin, one line: a JSON object mapping factor names to
//!     decoded values plus "run_id", e.g.
//!     {"Op":5,"N1":20,"N2":18,"N3":10,"Ep":703,"Bh":8542,"Lr":3,"run_id":161}
//!   ← child stdout, one line: {"loss": <finite real>}
//!   exit code 0 required; anything else is an evaluation error.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::doe::{DecodedSettings, FactorSpec};
use crate::error::{Error, Result};

fn default_timeout() -> f64 {
    3600.0
}

/// What produces the loss for a decoded run setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveSpec {
    /// c + b·x + xᵀBx evaluated in the *original* coded frame of the
    /// declared factors (re-centering a campaign never moves the true
    /// surface), plus Gaussian noise keyed by (seed, run_id).
    BuiltinQuadratic {
        #[serde(rename = "B")]
        quadratic: Vec<Vec<f64>>,
        #[serde(rename = "b")]
        linear: Vec<f64>,
        #[serde(rename = "c")]
        offset: f64,
        #[serde(default)]
        noise_sigma: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Spawn `command`, speak the one-line protocol, collect the loss.
    External {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_seconds: f64,
    },
}

impl ObjectiveSpec {
    pub fn validate(&self, n_factors: usize) -> Result<()> {
        match self {
            ObjectiveSpec::BuiltinQuadratic {
                quadratic,
                linear,
                noise_sigma,
                ..
            } => {
                if quadratic.len() != n_factors || quadratic.iter().any(|r| r.len() != n_factors) {
                    return Err(Error::InvalidConfig {
                        field: "objective.B".into(),
                        reason: format!("must be a {n_factors}x{n_factors} matrix"),
                    });
                }
                for i in 0..n_factors {
                    for j in 0..n_factors {
                        if quadratic[i][j] != quadratic[j][i] {
                            return Err(Error::InvalidConfig {
                                field: "objective.B".into(),
                                reason: format!(
                                    "must be symmetric; B[{i}][{j}] = {} but B[{j}][{i}] = {}",
                                    quadratic[i][j], quadratic[j][i]
                                ),
                            });
                        }
                    }
                }
                if linear.len() != n_factors {
                    return Err(Error::InvalidConfig {
                        field: "objective.b".into(),
                        reason: format!("must have {n_factors} entries"),
                    });
                }
                if !(noise_sigma.is_finite() && *noise_sigma >= 0.0) {
                    return Err(Error::InvalidConfig {
                        field: "objective.noise_sigma".into(),
                        reason: "must be a finite non-negative real".into(),
                    });
                }
            }
            ObjectiveSpec::External {
                command,
                timeout_seconds,
            } => {
                if command.is_empty() {
                    return Err(Error::InvalidConfig {
                        field: "objective.command".into(),
                        reason: "must name an executable".into(),
                    });
                }
                if !(timeout_seconds.is_finite() && *timeout_seconds > 0.0) {
                    return Err(Error::InvalidConfig {
                        field: "objective.timeout_seconds".into(),
                        reason: "must be a positive real".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// An objective bound to the factor declarations it evaluates over.
/// The original factor list fixes the coded frame of the builtin
/// surface and the name order on the external wire.
#[derive(Debug, Clone)]
pub struct Objective {
    spec: ObjectiveSpec,
    original_factors: Vec<FactorSpec>,
}

impl Objective {
    pub fn new(spec: ObjectiveSpec, original_factors: Vec<FactorSpec>) -> Result<Self> {
        spec.validate(original_factors.len())?;
        Ok(Objective {
            spec,
            original_factors,
        })
    }

    /// Evaluates the objective at a decoded setting. Deterministic for
    /// a given (spec, setting, run_id): replicated runs differ only
    /// through their run ids.
    pub fn evaluate(&self, decoded: &DecodedSettings, run_id: u64) -> Result<f64> {
        for factor in &self.original_factors {
            if !decoded.iter().any(|(name, _)| *name == factor.name) {
                return Err(Error::EvaluationFailed {
                    run_id,
                    detail: format!("setting is missing factor `{}`", factor.name),
                });
            }
        }
        match &self.spec {
            ObjectiveSpec::BuiltinQuadratic {
                quadratic,
                linear,
                offset,
                noise_sigma,
                seed,
            } => {
                // re-encode into the original frame, in declared order
                let x: Vec<f64> = self
                    .original_factors
                    .iter()
                    .map(|f| {
                        let v = decoded
                            .iter()
                            .find(|(name, _)| *name == f.name)
                            .map(|(_, v)| v.as_f64())
                            .expect("presence checked above");
                        f.encode(v)
                    })
                    .collect();
                let mut y = *offset;
                for (j, xj) in x.iter().enumerate() {
                    y += linear[j] * xj;
                    for (k, xk) in x.iter().enumerate() {
                        y += quadratic[j][k] * xj * xk;
                    }
                }
                if *noise_sigma > 0.0 {
                    y += noise_sigma * noise_draw(*seed, run_id);
                }
                Ok(y)
            }
            ObjectiveSpec::External {
                command,
                timeout_seconds,
            } => {
                let line = wire_request(decoded, run_id);
                run_external(command, *timeout_seconds, &line, run_id)
            }
        }
    }
}

/// One standard-normal draw from a stream keyed by (seed, run_id), so
/// every run id has its own reproducible noise regardless of the order
/// or parallelism of evaluation.
fn noise_draw(seed: u64, run_id: u64) -> f64 {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&run_id.to_le_bytes());
    let mut rng = ChaCha12Rng::from_seed(key);
    StandardNormal.sample(&mut rng)
}

/// The one-line JSON request: factor values in declared order, then
/// the run id.
pub fn wire_request(decoded: &DecodedSettings, run_id: u64) -> String {
    let mut map = serde_json::Map::new();
    for (name, value) in decoded {
        map.insert(
            name.clone(),
            serde_json::to_value(value).expect("decoded values always serialize"),
        );
    }
    map.insert("run_id".into(), serde_json::Value::from(run_id));
    serde_json::Value::Object(map).to_string()
}

#[derive(Deserialize)]
struct WireReply {
    loss: f64,
}

fn run_external(command: &[String], timeout_seconds: f64, line: &str, run_id: u64) -> Result<f64> {
    use std::os::unix::process::CommandExt;

    let fail = |detail: String| Error::EvaluationFailed { run_id, detail };

    let mut child = Command::new(&command[0])
        .args(&command[1..])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        // own process group, so a timeout can reap the whole tree —
        // killing just the shell would leave grandchildren holding our
        // pipes (and the GPUs)
        .process_group(0)
        .spawn()
        .map_err(|e| fail(format!("could not spawn `{}`: {e}", command[0])))?;

    // send the request and close stdin; a child that exits without
    // reading it produces a broken pipe, which is its prerogative
    {
        let mut stdin = child.stdin.take().expect("stdin was piped");
        let payload = format!("{line}\n");
        if let Err(e) = stdin.write_all(payload.as_bytes()) {
            if e.kind() != std::io::ErrorKind::BrokenPipe {
                let _ = child.kill();
                let _ = child.wait();
                return Err(fail(format!("writing request: {e}")));
            }
        }
    }

    // drain pipes on threads so a chatty child can never deadlock us
    let mut stdout = child.stdout.take().expect("stdout was piped");
    let mut stderr = child.stderr.take().expect("stderr was piped");
    let out_thread = std::thread::spawn(move || {
        let mut buf = String::new();
        let _ = stdout.read_to_string(&mut buf);
        buf
    });
    let err_thread = std::thread::spawn(move || {
        let mut buf = String::new();
        let _ = stderr.read_to_string(&mut buf);
        buf
    });

    let deadline = Instant::now() + Duration::from_secs_f64(timeout_seconds);
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {
                if Instant::now() >= deadline {
                    // SIGKILL the group: it cannot be caught, so the
                    // follow-up wait is bounded. The drain threads are
                    // dropped, not joined — a descendant that escaped
                    // into its own session could hold the pipes open.
                    unsafe {
                        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
                    }
                    let _ = child.wait();
                    drop(out_thread);
                    drop(err_thread);
                    return Err(fail(format!(
                        "timed out after {timeout_seconds}s; process group killed"
                    )));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(fail(format!("waiting on child: {e}")));
            }
        }
    };

    let stdout_text = out_thread.join().unwrap_or_default();
    let stderr_text = err_thread.join().unwrap_or_default();

    if !status.success() {
        return Err(fail(format!(
            "exited with {status}{}",
            stderr_tail(&stderr_text)
        )));
    }
    let reply_line = stdout_text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| fail(format!("no reply on stdout{}", stderr_tail(&stderr_text))))?;
    let reply: WireReply = serde_json::from_str(reply_line)
        .map_err(|e| fail(format!("malformed reply {reply_line:?}: {e}")))?;
    if !reply.loss.is_finite() {
        return Err(fail(format!("non-finite loss {}", reply.loss)));
    }
    Ok(reply.loss)
}

fn stderr_tail(text: &str) -> String {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return String::new();
    }
    let tail: Vec<&str> = trimmed.lines().rev().take(5).collect();
    let mut lines: Vec<&str> = tail.into_iter().rev().collect();
    if lines.len() == 5 && trimmed.lines().count() > 5 {
        lines.insert(0, "...");
    }
    format!("; stderr: {}", lines.join(" | "))
}

/// Observed counts with their fitted Poisson means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevianceSample {
    pub counts: Vec<u64>,
    pub fitted: Vec<f64>,
}

/// Mean Poisson deviance: the average over policies of
/// 2N[μ/N − 1 − ln(μ/N)], where μ is the fitted mean. The N = 0 term is
/// the analytic limit 2μ (the formula's log is undefined there).
pub fn poisson_deviance(sample: &DevianceSample) -> Result<f64> {
    if sample.counts.len() != sample.fitted.len() {
        return Err(Error::DimensionMismatch {
            expected: sample.counts.len(),
            got: sample.fitted.len(),
        });
    }
    if sample.counts.is_empty() {
        return Err(Error::InvalidSample("no observations".into()));
    }
    let mut total = 0.0;
    for (i, (&n, &mu)) in sample.counts.iter().zip(&sample.fitted).enumerate() {
        if !(mu.is_finite() && mu > 0.0) {
            return Err(Error::InvalidSample(format!(
                "fitted value at index {i} must be strictly positive, got {mu}"
            )));
        }
        total += if n == 0 {
            2.0 * mu
        } else {
            let ratio = mu / n as f64;
            2.0 * n as f64 * (ratio - 1.0 - ratio.ln())
        };
    }
    Ok(total / sample.counts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doe::{DecodedValue, FactorKind};
    use proptest::prelude::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn two_factors() -> Vec<FactorSpec> {
        vec![
            FactorSpec::new("a", FactorKind::Continuous, -1.0, 1.0).unwrap(),
            FactorSpec::new("b", FactorKind::Continuous, -1.0, 1.0).unwrap(),
        ]
    }

    fn setting(a: f64, b: f64) -> DecodedSettings {
        vec![
            ("a".to_string(), DecodedValue::Real(a)),
            ("b".to_string(), DecodedValue::Real(b)),
        ]
    }

    fn identity_quadratic(noise_sigma: f64, seed: u64) -> ObjectiveSpec {
        ObjectiveSpec::BuiltinQuadratic {
            quadratic: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            linear: vec![0.0, 0.0],
            offset: 0.25,
            noise_sigma,
            seed,
        }
    }

    #[test]
    fn builtin_quadratic_values() {
        let obj = Objective::new(identity_quadratic(0.0, 0), two_factors()).unwrap();
        approx(obj.evaluate(&setting(0.0, 0.0), 1).unwrap(), 0.25, 1e-15);
        approx(obj.evaluate(&setting(1.0, 1.0), 2).unwrap(), 2.25, 1e-15);
    }

    #[test]
    fn builtin_noise_is_reproducible_and_run_keyed() {
        let obj = Objective::new(identity_quadratic(0.5, 99), two_factors()).unwrap();
        let a1 = obj.evaluate(&setting(0.0, 0.0), 7).unwrap();
        let a2 = obj.evaluate(&setting(0.0, 0.0), 7).unwrap();
        let b = obj.evaluate(&setting(0.0, 0.0), 8).unwrap();
        assert_eq!(a1, a2);
        assert_ne!(a1, b, "replicates must differ through their run ids");

        let other_seed = Objective::new(identity_quadratic(0.5, 100), two_factors()).unwrap();
        assert_ne!(a1, other_seed.evaluate(&setting(0.0, 0.0), 7).unwrap());
    }

    #[test]
    fn builtin_evaluates_in_original_frame() {
        // same natural-unit point, factors re-centered: value unchanged
        let obj = Objective::new(
            identity_quadratic(0.0, 0),
            vec![
                FactorSpec::new("a", FactorKind::Continuous, 0.0, 10.0).unwrap(),
                FactorSpec::new("b", FactorKind::Continuous, 0.0, 10.0).unwrap(),
            ],
        )
        .unwrap();
        // natural (7.5, 5.0) → original coded (0.5, 0.0)
        let y = obj.evaluate(&setting(7.5, 5.0), 1).unwrap();
        approx(y, 0.25 + 0.25, 1e-15);
    }

    #[test]
    fn builtin_minimum_matches_closed_form() {
        // minimizer −½B⁻¹b, minimum c − ¼bᵀB⁻¹b
        let spec = ObjectiveSpec::BuiltinQuadratic {
            quadratic: vec![vec![2.0, 0.5], vec![0.5, 1.0]],
            linear: vec![1.0, -2.0],
            offset: 3.0,
            noise_sigma: 0.0,
            seed: 0,
        };
        let obj = Objective::new(spec, two_factors()).unwrap();
        // B⁻¹ = (1/1.75)·[[1, −0.5], [−0.5, 2]]
        let det = 2.0 * 1.0 - 0.25;
        let binv = [[1.0 / det, -0.5 / det], [-0.5 / det, 2.0 / det]];
        let b = [1.0, -2.0];
        let x_min = [
            -0.5 * (binv[0][0] * b[0] + binv[0][1] * b[1]),
            -0.5 * (binv[1][0] * b[0] + binv[1][1] * b[1]),
        ];
        let want = 3.0 - 0.25 * (b[0] * (binv[0][0] * b[0] + binv[0][1] * b[1])
            + b[1] * (binv[1][0] * b[0] + binv[1][1] * b[1]));
        let got = obj.evaluate(&setting(x_min[0], x_min[1]), 1).unwrap();
        approx(got, want, 1e-10);
    }

    #[test]
    fn builtin_validation_rejects_bad_specs() {
        let asym = ObjectiveSpec::BuiltinQuadratic {
            quadratic: vec![vec![1.0, 0.2], vec![0.3, 1.0]],
            linear: vec![0.0, 0.0],
            offset: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        };
        assert!(Objective::new(asym, two_factors()).is_err());

        let wrong_dim = ObjectiveSpec::BuiltinQuadratic {
            quadratic: vec![vec![1.0]],
            linear: vec![0.0],
            offset: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        };
        assert!(Objective::new(wrong_dim, two_factors()).is_err());

        let missing = Objective::new(identity_quadratic(0.0, 0), two_factors()).unwrap();
        let partial = vec![("a".to_string(), DecodedValue::Real(0.0))];
        assert!(missing.evaluate(&partial, 1).is_err());
    }

    #[test]
    fn wire_request_preserves_declaration_order() {
        let decoded = vec![
            ("Op".to_string(), DecodedValue::Int(5)),
            ("Ep".to_string(), DecodedValue::Int(703)),
            ("Lr".to_string(), DecodedValue::Int(3)),
        ];
        assert_eq!(
            wire_request(&decoded, 161),
            r#"{"Op":5,"Ep":703,"Lr":3,"run_id":161}"#
        );
    }

    fn sh_objective(script: &str, timeout_seconds: f64) -> Objective {
        Objective::new(
            ObjectiveSpec::External {
                command: vec!["/bin/sh".into(), "-c".into(), script.into()],
                timeout_seconds,
            },
            two_factors(),
        )
        .unwrap()
    }

    #[test]
    fn external_round_trip() {
        // echo a fixed loss regardless of the request
        let obj = sh_objective("read line; echo '{\"loss\": 0.375}'", 10.0);
        approx(obj.evaluate(&setting(0.5, -0.5), 3).unwrap(), 0.375, 1e-15);
    }

    #[test]
    fn external_sees_the_request_line() {
        // child extracts a field from the request with basic tools
        let obj = sh_objective(
            "read line; n=$(printf '%s' \"$line\" | sed 's/.*\"run_id\"://; s/[^0-9].*//'); echo \"{\\\"loss\\\": $n}\"",
            10.0,
        );
        approx(obj.evaluate(&setting(0.0, 0.0), 42).unwrap(), 42.0, 1e-15);
    }

    #[test]
    fn external_nonzero_exit_is_an_error() {
        let obj = sh_objective("echo oops >&2; exit 3", 10.0);
        match obj.evaluate(&setting(0.0, 0.0), 1) {
            Err(Error::EvaluationFailed { detail, .. }) => {
                assert!(detail.contains("oops"), "diagnostics missing: {detail}");
            }
            other => panic!("expected evaluation failure, got {other:?}"),
        }
    }

    #[test]
    fn external_malformed_reply_is_an_error() {
        let obj = sh_objective("echo not-json", 10.0);
        assert!(matches!(
            obj.evaluate(&setting(0.0, 0.0), 1),
            Err(Error::EvaluationFailed { .. })
        ));
        let nan = sh_objective("echo '{\"loss\": null}'", 10.0);
        assert!(nan.evaluate(&setting(0.0, 0.0), 1).is_err());
    }

    #[test]
    fn external_timeout_kills_child_within_bounds() {
        let obj = sh_objective("sleep 30", 0.3);
        let start = Instant::now();
        let err = obj.evaluate(&setting(0.0, 0.0), 1).unwrap_err();
        let elapsed = start.elapsed();
        assert!(matches!(err, Error::EvaluationFailed { .. }));
        assert!(
            elapsed < Duration::from_secs(5),
            "kill must not hang: took {elapsed:?}"
        );
        let detail = err.to_string();
        assert!(detail.contains("timed out"), "got: {detail}");
    }

    #[test]
    fn deviance_reference_values() {
        let one = DevianceSample {
            counts: vec![1],
            fitted: vec![2.0],
        };
        approx(poisson_deviance(&one).unwrap(), 0.613706, 5e-7);

        let perfect = DevianceSample {
            counts: vec![3, 7],
            fitted: vec![3.0, 7.0],
        };
        approx(poisson_deviance(&perfect).unwrap(), 0.0, 1e-15);

        let zero = DevianceSample {
            counts: vec![0],
            fitted: vec![0.5],
        };
        approx(poisson_deviance(&zero).unwrap(), 1.0, 1e-15);
    }

    #[test]
    fn deviance_rejects_bad_samples() {
        assert!(poisson_deviance(&DevianceSample {
            counts: vec![1, 2],
            fitted: vec![1.0],
        })
        .is_err());
        assert!(poisson_deviance(&DevianceSample {
            counts: vec![1],
            fitted: vec![0.0],
        })
        .is_err());
        assert!(poisson_deviance(&DevianceSample {
            counts: vec![],
            fitted: vec![],
        })
        .is_err());
    }

    #[test]
    fn deviance_term_convex_with_minimum_at_count() {
        // slide the fitted value around each count: the deviance dips
        // exactly at fitted = N and curves upward on both sides
        for n in 1u64..=5 {
            let at = |mu: f64| {
                poisson_deviance(&DevianceSample {
                    counts: vec![n],
                    fitted: vec![mu],
                })
                .unwrap()
            };
            let center = n as f64;
            let h = 1e-4;
            assert!(at(center) <= at(center - h));
            assert!(at(center) <= at(center + h));
            for mu in [0.3 * center, 0.8 * center, 1.3 * center, 2.5 * center] {
                let second = at(mu - h) - 2.0 * at(mu) + at(mu + h);
                assert!(second > 0.0, "deviance must be convex at mu={mu}");
            }
        }
    }

    proptest! {
        #[test]
        fn deviance_nonnegative(counts in proptest::collection::vec(0u64..20, 1..8), scale in 0.1f64..5.0) {
            let fitted: Vec<f64> = counts.iter().map(|&n| (n as f64).max(0.5) * scale).collect();
            let d = poisson_deviance(&DevianceSample { counts, fitted }).unwrap();
            prop_assert!(d >= 0.0);
        }

        #[test]
        fn deviance_zero_iff_perfect(counts in proptest::collection::vec(1u64..20, 1..8)) {
            let fitted: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
            let d = poisson_deviance(&DevianceSample { counts, fitted }).unwrap();
            prop_assert!(d.abs() <= 1e-12);
        }

        #[test]
        fn builtin_determinism(run_id in 0u64..10_000, seed in 0u64..1_000) {
            let obj = Objective::new(identity_quadratic(1.0, seed), two_factors()).unwrap();
            let s = setting(0.25, -0.75);
            prop_assert_eq!(obj.evaluate(&s, run_id).unwrap(), obj.evaluate(&s, run_id).unwrap());
        }
    }
}
