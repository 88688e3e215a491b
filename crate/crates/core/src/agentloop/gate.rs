use super::candidate::{parse_candidate, Candidate};
use super::llm::ChatBackend;
use super::prompts::{render, VERIFICATION_PROMPT};
use crate::error::Span;
use crate::evalharness::Status;
use crate::mechdsl::{equations, parse, pretty, verify, ModelSpec, VerifyConfig, VerifyReport};

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Accept {
        candidate: Candidate,
        spec: ModelSpec,
        /// Warning codes that were let through.
        warnings: Vec<String>,
    },
    Reject(Rejection),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    /// `ParseError` or `VerifyError`.
    pub status: Status,
    pub code: String,
    pub reason: String,
    pub span: Option<Span>,
    /// The program text the position refers to.
    pub source: String,
}

fn reject(status: Status, code: &str, reason: String, span: Option<Span>, source: &str) -> Verdict {
    Verdict::Reject(Rejection {
        status,
        code: code.to_string(),
        reason,
        span,
        source: source.to_string(),
    })
}

fn describe(spec: &ModelSpec) -> String {
    let params: Vec<String> = spec.params.iter().map(|p| p.channel.to_string()).collect();
    format!(
        "Metapopulation compartmental model `{}` with compartments [{}] and parameters [{}] produced by a bounded neural network.",
        spec.name,
        spec.compartments.join(", "),
        params.join(", ")
    )
}

/// Reads the last `VERDICT:` line; anything but `reject` accepts.
pub fn judge_rejects(completion: &str) -> bool {
    completion
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix("VERDICT:"))
        .is_some_and(|v| v.trim().eq_ignore_ascii_case("reject"))
}

/// Parse, static rules, then the optional judge on warning-bearing programs.
pub fn verify_candidate(text: &str, config: &VerifyConfig, judge: Option<&dyn ChatBackend>) -> Verdict {
    let candidate = match parse_candidate(text) {
        Ok(c) => c,
        Err(e) => return reject(Status::ParseError, e.code(), e.to_string(), None, text),
    };
    let spec = match parse(&candidate.spec_text) {
        Ok(s) => s,
        Err(e) => {
            return reject(Status::ParseError, e.code(), e.to_string(), e.span(), &candidate.spec_text);
        }
    };
    let report: VerifyReport = verify(&spec, config);
    let blocking = report
        .errors
        .iter()
        .chain(report.warnings.iter().filter(|w| config.reject_warnings.contains(&w.code)))
        .next();
    if let Some(f) = blocking {
        let all: Vec<String> = report.errors.iter().map(|f| format!("{} {}", f.code, f.msg)).collect();
        let reason = if all.is_empty() {
            format!("{} {}", f.code, f.msg)
        } else {
            all.join("; ")
        };
        return reject(Status::VerifyError, &f.code, reason, Some(f.span), &candidate.spec_text);
    }
    let warnings: Vec<String> = report.warnings.iter().map(|w| w.code.clone()).collect();
    if !warnings.is_empty() {
        match judge {
            None => log::info!("accepting with warnings {warnings:?}"),
            Some(judge) => {
                let prompt = render(
                    VERIFICATION_PROMPT,
                    &[
                        ("code_description", &describe(&spec)),
                        ("state_code", pretty(&spec).trim_end()),
                        ("equations", equations(&spec).trim_end()),
                    ],
                );
                match judge.complete("You review epidemic models for physical validity.", &prompt) {
                    Ok(answer) if judge_rejects(&answer) => {
                        let tail: String = answer.chars().rev().take(400).collect::<Vec<_>>().into_iter().rev().collect();
                        return reject(Status::VerifyError, "JUDGE", tail, None, &candidate.spec_text);
                    }
                    Ok(_) => {}
                    Err(e) => log::warn!("judge unavailable ({e}); keeping rule verdict"),
                }
            }
        }
    }
    Verdict::Accept {
        candidate,
        spec,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::{Error, Result};
    use crate::mechdsl::fixtures::{CANONICAL_SEIRM, DUAL_PATHWAY};

    #[test]
    fn canonical_accepts_clean() {
        match verify_candidate(CANONICAL_SEIRM, &VerifyConfig::default(), None) {
            Verdict::Accept { warnings, .. } => assert!(warnings.is_empty()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dual_pathway_accepts_with_w1() {
        match verify_candidate(DUAL_PATHWAY, &VerifyConfig::default(), None) {
            Verdict::Accept { warnings, .. } => assert!(warnings.contains(&"W1".to_string())),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn configured_warning_rejects() {
        let mut cfg = VerifyConfig::default();
        cfg.reject_warnings.insert("W1".into());
        match verify_candidate(DUAL_PATHWAY, &cfg, None) {
            Verdict::Reject(r) => {
                assert_eq!(r.status, Status::VerifyError);
                assert_eq!(r.code, "W1");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unparseable_is_parse_error() {
        match verify_candidate("flow S -> : beta * S", &VerifyConfig::default(), None) {
            Verdict::Reject(r) => {
                assert_eq!(r.status, Status::ParseError);
                assert_eq!(r.code, "PARSE_ERROR");
                assert_eq!(r.span, Some(Span::new(1, 11)));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unguarded_division_is_verify_error() {
        let src = CANONICAL_SEIRM.replace("alpha * E\nflow I", "alpha * E / I\nflow I");
        match verify_candidate(&src, &VerifyConfig::default(), None) {
            Verdict::Reject(r) => assert_eq!((r.status, r.code.as_str()), (Status::VerifyError, "E2")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn judge_can_veto_warnings_only() {
        let veto = |_: &str, u: &str| -> Result<String> {
            assert!(u.contains("dE/dt"));
            Ok("E has two exits to R.\nVERDICT: reject".into())
        };
        assert!(matches!(
            verify_candidate(DUAL_PATHWAY, &VerifyConfig::default(), Some(&veto)),
            Verdict::Reject(Rejection { ref code, .. }) if code == "JUDGE"
        ));
        // Clean programs never reach the judge.
        let never = |_: &str, _: &str| -> Result<String> { panic!("judge consulted") };
        assert!(matches!(
            verify_candidate(CANONICAL_SEIRM, &VerifyConfig::default(), Some(&never)),
            Verdict::Accept { .. }
        ));
        let down = |_: &str, _: &str| -> Result<String> { Err(Error::Generator("timeout".into())) };
        assert!(matches!(
            verify_candidate(DUAL_PATHWAY, &VerifyConfig::default(), Some(&down)),
            Verdict::Accept { .. }
        ));
    }

    #[test]
    fn verdict_line_parsing() {
        assert!(judge_rejects("x\nVERDICT: reject\n"));
        assert!(!judge_rejects("VERDICT: reject\nVERDICT: accept"));
        assert!(!judge_rejects("looks fine"));
    }
}
