use std::collections::BTreeSet;
use std::fmt::Write;

use super::candidate::Candidate;
use super::llm::ChatBackend;
use super::memory::{suggest_fix, RunMemory};
use super::prompts::{render, ERROR_CORRECTION_PROMPT, REFLECTION_PROMPT};
use crate::mechdsl::{parse, pretty};

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Success {
        g: usize,
        v: f64,
        /// Best score before this generation.
        previous_best: Option<f64>,
    },
    Failure {
        g: usize,
        code: String,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReflectContext {
    pub generations: usize,
    pub target_loss: f64,
}

/// Four decimals, trailing zeros dropped but one kept: `2.0`, `0.125`.
pub fn format_v(v: f64) -> String {
    let mut s = format!("{v:.4}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.push('0');
    }
    s
}

fn lines_of(c: &Candidate) -> (BTreeSet<String>, String) {
    match parse(&c.spec_text) {
        Ok(spec) => {
            let text = pretty(&spec);
            let flows = text.lines().filter(|l| l.starts_with("flow ")).map(str::to_string).collect();
            let obs = text.lines().find(|l| l.starts_with("observe ")).unwrap_or("").to_string();
            (flows, obs)
        }
        Err(_) => (BTreeSet::new(), String::new()),
    }
}

/// Flows added/removed, observation and config changes from `best` to `other`.
pub fn structural_diff(best: &Candidate, other: &Candidate) -> Vec<String> {
    let (bf, bo) = lines_of(best);
    let (of, oo) = lines_of(other);
    let mut out: Vec<String> = of.difference(&bf).map(|l| format!("+ {l}")).collect();
    out.extend(bf.difference(&of).map(|l| format!("- {l}")));
    if bo != oo {
        out.push(format!("observation `{bo}` -> `{oo}`"));
    }
    if best.config != other.config {
        out.push(format!(
            "network hidden {} cell {:?} -> hidden {} cell {:?}",
            best.config.hidden, best.config.cell, other.config.hidden, other.config.cell
        ));
    }
    out
}

/// Deterministic reflection used without an endpoint.
pub fn offline_reflection(memory: &RunMemory, outcome: &Outcome, last_accepted: Option<&Candidate>) -> String {
    let mut out = String::new();
    match outcome {
        Outcome::Success { g, v, previous_best } => {
            let best = memory.best().map(|m| m.v).unwrap_or(*v);
            match previous_best {
                Some(prev) => {
                    let _ = writeln!(
                        out,
                        "Generation {g} scored {}. Best validation RMSE {} -> {} (improvement {}).",
                        format_v(*v),
                        format_v(*prev),
                        format_v(best),
                        format_v(prev - best)
                    );
                }
                None => {
                    let _ = writeln!(out, "Generation {g} scored {}; first working program.", format_v(*v));
                }
            }
            if let (Some(best), Some(last)) = (memory.best(), last_accepted) {
                let diff = structural_diff(&best.candidate, last);
                if !diff.is_empty() {
                    let _ = writeln!(out, "Latest program versus best:");
                    for d in diff {
                        let _ = writeln!(out, "  {d}");
                    }
                }
            }
        }
        Outcome::Failure { g, code, message } => {
            let _ = writeln!(out, "Generation {g} failed with {code}: {message}");
            let _ = writeln!(out, "Fix: {}", suggest_fix(code, message));
        }
    }
    let recurring = memory.recurring_codes();
    if !recurring.is_empty() {
        let parts: Vec<String> = recurring.iter().map(|(c, n)| format!("{c} x{n}")).collect();
        let _ = writeln!(out, "Recurring errors: {}.", parts.join(", "));
    }
    out
}

/// Reflection text for the next generation. With an endpoint, successes use
/// the reflection template over the population and failures the
/// error-correction template over the error log.
pub fn reflect(
    memory: &RunMemory,
    outcome: &Outcome,
    last_accepted: Option<&Candidate>,
    best_curve: &[Option<f64>],
    llm: Option<&dyn ChatBackend>,
    ctx: ReflectContext,
) -> String {
    let Some(llm) = llm else {
        return offline_reflection(memory, outcome, last_accepted);
    };
    let prompt = match outcome {
        Outcome::Success { g, .. } => {
            let history: Vec<String> = best_curve
                .iter()
                .enumerate()
                .map(|(i, v)| match v {
                    Some(v) => format!("generation {}: best {}", i + 1, format_v(*v)),
                    None => format!("generation {}: no working program yet", i + 1),
                })
                .collect();
            let completions: Vec<String> = memory
                .population
                .iter()
                .rev()
                .map(|m| format!("# validation RMSE {}\n{}", format_v(m.v), m.candidate.render()))
                .collect();
            let errors = memory.render_errors();
            let error_section = if errors.is_empty() {
                String::new()
            } else {
                format!("Failures so far:\n{errors}")
            };
            render(
                REFLECTION_PROMPT,
                &[
                    ("target_loss", &format_v(ctx.target_loss)),
                    ("history", &history.join("\n")),
                    ("completions", &completions.join("\n")),
                    ("error_section", &error_section),
                    ("iteration", &(g + 1).to_string()),
                    ("generations", &ctx.generations.to_string()),
                ],
            )
        }
        Outcome::Failure { code, message, .. } => render(
            ERROR_CORRECTION_PROMPT,
            &[
                ("errors_text", &format!("[{code}] {message}")),
                ("joined_errors", &memory.render_errors()),
            ],
        ),
    };
    match llm.complete("You analyze epidemic model search results.", &prompt) {
        Ok(text) => text,
        Err(e) => {
            log::warn!("reflection endpoint failed ({e}); using offline template");
            offline_reflection(memory, outcome, last_accepted)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agentloop::memory::{ErrorEntry, Member};
    use crate::calib::NetConfig;
    use crate::error::{Error, Result};
    use crate::mechdsl::fixtures::CANONICAL_SEIRM;

    fn member(g: usize, text: &str, v: f64) -> Member {
        Member {
            g,
            candidate: Candidate::new(text, NetConfig::default()),
            v,
        }
    }

    #[test]
    fn improvement_delta_is_reported() {
        let mut m = RunMemory::default();
        m.insert(member(1, CANONICAL_SEIRM, 10.0), 3);
        m.insert(member(2, CANONICAL_SEIRM, 8.0), 3);
        let out = Outcome::Success {
            g: 2,
            v: 8.0,
            previous_best: Some(10.0),
        };
        let text = offline_reflection(&m, &out, Some(&m.population[0].candidate.clone()));
        assert!(text.contains("improvement 2.0"), "{text}");
        assert!(!text.contains("Recurring"));
    }

    #[test]
    fn diff_lists_flow_changes() {
        let other = CANONICAL_SEIRM.replace("flow R -> S : delta * R\n", "");
        let d = structural_diff(
            &Candidate::new(CANONICAL_SEIRM, NetConfig::default()),
            &Candidate::new(other, NetConfig { hidden: 8, ..NetConfig::default() }),
        );
        assert!(d.contains(&"- flow R -> S : delta * R".to_string()), "{d:?}");
        assert!(d.iter().any(|l| l.starts_with("network hidden 32")));
    }

    #[test]
    fn failures_mention_fix_and_recurrence() {
        let mut m = RunMemory::default();
        for g in [1, 2] {
            m.record_error(ErrorEntry::new(g, "E2", "unguarded", "", None));
        }
        let out = Outcome::Failure {
            g: 2,
            code: "E2".into(),
            message: "unguarded".into(),
        };
        let text = offline_reflection(&m, &out, None);
        assert!(text.contains("max(x, 1e-8)"));
        assert!(text.contains("Recurring errors: E2 x2."));
    }

    #[test]
    fn endpoint_prompts_and_fallback() {
        let mut m = RunMemory::default();
        m.insert(member(1, CANONICAL_SEIRM, 3.0), 3);
        let ctx = ReflectContext {
            generations: 40,
            target_loss: 1.0,
        };
        let ok = Outcome::Success {
            g: 1,
            v: 3.0,
            previous_best: None,
        };
        let echo = |_: &str, u: &str| -> Result<String> { Ok(u.to_string()) };
        let text = reflect(&m, &ok, None, &[Some(3.0)], Some(&echo), ctx);
        assert!(text.contains("generation 2 of 40"));
        assert!(!text.contains("Failures so far"));
        let fail = Outcome::Failure {
            g: 2,
            code: "PARSE_ERROR".into(),
            message: "bad".into(),
        };
        assert!(reflect(&m, &fail, None, &[], Some(&echo), ctx).contains("[PARSE_ERROR] bad"));
        let down = |_: &str, _: &str| -> Result<String> { Err(Error::Generator("x".into())) };
        assert_eq!(
            reflect(&m, &ok, None, &[], Some(&down), ctx),
            offline_reflection(&m, &ok, None)
        );
    }

    #[test]
    fn v_formatting() {
        assert_eq!(format_v(2.0), "2.0");
        assert_eq!(format_v(0.125), "0.125");
        assert_eq!(format_v(1.23456), "1.2346");
    }
}
