//! Candidate text: a DSL program, optionally fenced, with an optional
//! `config` fence of `key = value` lines for the calibration network.
//!
//! ````text
//! ```nimm
//! model seirm
//! ...
//! ```
//! ```config
//! hidden = 16
//! cell = rnn
//! ```
//! ````
//!
//! When several program fences are present the first one is taken.

use serde::{Deserialize, Serialize};

use crate::calib::{CellType, NetConfig};
use crate::error::{Error, Result};
use crate::mechdsl::{parse, pretty};

pub const MAX_HIDDEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub spec_text: String,
    pub config: NetConfig,
}

impl Candidate {
    pub fn new(spec_text: impl Into<String>, config: NetConfig) -> Self {
        Self {
            spec_text: spec_text.into(),
            config,
        }
    }

    /// Fenced form; the config fence is omitted when it holds the defaults.
    pub fn render(&self) -> String {
        let mut out = format!("```nimm\n{}", self.spec_text);
        if !self.spec_text.ends_with('\n') {
            out.push('\n');
        }
        out.push_str("```\n");
        if self.config != NetConfig::default() {
            out.push_str(&format!("```config\n{}```\n", render_config(&self.config)));
        }
        out
    }

    /// Dedup key: the canonical print when the program parses, otherwise the
    /// whitespace-collapsed text; the network config is part of the key.
    pub fn normalized(&self) -> String {
        let body = match parse(&self.spec_text) {
            Ok(spec) => pretty(&spec),
            Err(_) => self.spec_text.split_whitespace().collect::<Vec<_>>().join(" "),
        };
        format!("{body}\n{}", render_config(&self.config))
    }
}

pub fn render_config(config: &NetConfig) -> String {
    let cell = match config.cell {
        CellType::Gru => "gru",
        CellType::Rnn => "rnn",
    };
    format!("hidden = {}\ncell = {cell}\n", config.hidden)
}

pub fn parse_config(text: &str) -> Result<NetConfig> {
    let mut config = NetConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Format(format!("config line {}: {msg}", i + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
        match (key.trim(), value.trim()) {
            ("hidden", v) => {
                let h: usize = v.parse().map_err(|_| bad(format!("hidden must be an integer, got `{v}`")))?;
                if h == 0 || h > MAX_HIDDEN {
                    return Err(bad(format!("hidden must be in 1..={MAX_HIDDEN}")));
                }
                config.hidden = h;
            }
            ("cell", "gru") => config.cell = CellType::Gru,
            ("cell", "rnn") => config.cell = CellType::Rnn,
            ("cell", v) => return Err(bad(format!("cell must be gru or rnn, got `{v}`"))),
            (k, _) => return Err(bad(format!("unknown key `{k}`"))),
        }
    }
    Ok(config)
}

struct Fence<'a> {
    tag: &'a str,
    body: String,
}

fn fences(text: &str) -> Vec<Fence<'_>> {
    let mut out = Vec::new();
    let mut open: Option<(&str, String)> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        match (&mut open, trimmed.strip_prefix("```")) {
            (None, Some(tag)) => open = Some((tag.trim(), String::new())),
            (Some(_), Some(rest)) if rest.trim().is_empty() => {
                let (tag, body) = open.take().expect("open fence");
                out.push(Fence { tag, body });
            }
            (Some((_, body)), _) => {
                body.push_str(line);
                body.push('\n');
            }
            (None, None) => {}
        }
    }
    out
}

fn is_config(tag: &str) -> bool {
    tag.eq_ignore_ascii_case("config")
}

/// Splits candidate text into program and config. Unfenced text is taken
/// whole as the program with default config.
pub fn parse_candidate(text: &str) -> Result<Candidate> {
    let blocks = fences(text);
    if blocks.is_empty() {
        return Ok(Candidate::new(text, NetConfig::default()));
    }
    let program = blocks
        .iter()
        .find(|f| !is_config(f.tag))
        .ok_or_else(|| Error::Format("config fence without a program fence".into()))?;
    let config = match blocks.iter().find(|f| is_config(f.tag)) {
        Some(f) => parse_config(&f.body)?,
        None => NetConfig::default(),
    };
    Ok(Candidate::new(program.body.clone(), config))
}

/// Pulls the candidate out of a model completion. Unlike [`parse_candidate`],
/// a completion without a program fence is a `FORMAT_ERROR`.
pub fn extract_candidate(completion: &str) -> Result<String> {
    let blocks = fences(completion);
    let program = blocks.iter().find(|f| !is_config(f.tag)).ok_or_else(|| {
        Error::Format(format!(
            "no fenced program block in completion: {}",
            completion.chars().take(200).collect::<String>()
        ))
    })?;
    let mut out = format!("```nimm\n{}```\n", program.body);
    if let Some(c) = blocks.iter().find(|f| is_config(f.tag)) {
        out.push_str(&format!("```config\n{}```\n", c.body));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechdsl::fixtures::CANONICAL_SEIRM;

    #[test]
    fn render_then_parse_round_trips() {
        let c = Candidate::new(CANONICAL_SEIRM, NetConfig { hidden: 16, cell: CellType::Rnn });
        assert_eq!(parse_candidate(&c.render()).unwrap(), c);
        let d = Candidate::new(CANONICAL_SEIRM, NetConfig::default());
        assert!(!d.render().contains("config"));
        assert_eq!(parse_candidate(&d.render()).unwrap(), d);
    }

    #[test]
    fn unfenced_text_is_the_program() {
        let c = parse_candidate(CANONICAL_SEIRM).unwrap();
        assert_eq!(c.spec_text, CANONICAL_SEIRM);
        assert_eq!(c.config, NetConfig::default());
    }

    #[test]
    fn first_program_fence_wins() {
        let text = "intro\n```nimm\nobserve I\n```\nmore\n```\nobserve E\n```\n";
        assert_eq!(parse_candidate(text).unwrap().spec_text, "observe I\n");
        assert_eq!(extract_candidate(text).unwrap(), "```nimm\nobserve I\n```\n");
    }

    #[test]
    fn completion_without_fence_is_a_format_error() {
        let err = extract_candidate("I think the model should have an E compartment.").unwrap_err();
        assert_eq!(err.code(), "FORMAT_ERROR");
    }

    #[test]
    fn config_errors() {
        for bad in ["hidden = 0", "hidden = x", "cell = lstm", "depth = 2", "hidden"] {
            assert_eq!(parse_config(bad).unwrap_err().code(), "FORMAT_ERROR", "{bad}");
        }
        let c = parse_config("# tuned\nhidden = 8\ncell = rnn\n").unwrap();
        assert_eq!(c, NetConfig { hidden: 8, cell: CellType::Rnn });
    }

    #[test]
    fn normalization_ignores_layout() {
        let a = Candidate::new("compartments S, I\nobserve I", NetConfig::default());
        let b = Candidate::new("compartments  S,I\n\n# note\nobserve   I\n", NetConfig::default());
        assert_eq!(a.normalized(), b.normalized());
        let c = Candidate::new("compartments S, I\nobserve I", NetConfig { hidden: 8, ..NetConfig::default() });
        assert_ne!(a.normalized(), c.normalized());
    }
}
