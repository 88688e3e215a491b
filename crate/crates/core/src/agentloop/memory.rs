use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::candidate::Candidate;
use super::retrieval::Snippet;
use crate::error::Span;

/// Error entries rendered into prompts; older groups collapse into counts.
pub const ERROR_RENDER_CAP: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub g: usize,
    pub candidate: Candidate,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEntry {
    pub g: usize,
    pub code: String,
    pub message: String,
    /// Up to five numbered lines around the reported position.
    pub excerpt: String,
    pub fix: String,
}

impl ErrorEntry {
    pub fn new(g: usize, code: &str, message: &str, source: &str, span: Option<Span>) -> Self {
        Self {
            g,
            code: code.to_string(),
            message: message.to_string(),
            excerpt: excerpt(source, span),
            fix: suggest_fix(code, message).to_string(),
        }
    }
}

/// Lines `line-2 ..= line+2` of `source`, numbered. Without a span, the first five.
pub fn excerpt(source: &str, span: Option<Span>) -> String {
    let lines: Vec<&str> = source.lines().collect();
    let centre = span.map(|s| s.line.max(1) - 1).unwrap_or(2);
    let lo = centre.saturating_sub(2);
    let hi = (centre + 3).min(lines.len());
    let mut out = String::new();
    for (i, line) in lines.iter().enumerate().take(hi).skip(lo) {
        let _ = writeln!(out, "{:>3} | {line}", i + 1);
    }
    out
}

pub fn suggest_fix(code: &str, message: &str) -> &'static str {
    match code {
        "PARSE_ERROR" => "Rewrite the reported line to follow the grammar shown in the skeleton.",
        "FORMAT_ERROR" if message.starts_with("config") => {
            "Use only `hidden = <1..256>` and `cell = gru|rnn` in the config fence."
        }
        "FORMAT_ERROR" => "Return the program inside a ```nimm fenced block.",
        "E1" => "Declare every compartment and parameter before using it.",
        "E2" => "Guard every denominator as max(x, 1e-8).",
        "E3" => "Initialize from N so masses are nonnegative and sum to N.",
        "E4" => "Add an observe line over compartments and parameters only.",
        "W1" | "W2" | "W3" | "W4" => "Make each flow a single mass-action term with the parameter in its usual role.",
        "JUDGE" => "Address the physical-validity issues raised in review.",
        "SIM_DIVERGENCE" => "Keep rates linear in compartment sizes so states stay bounded.",
        "OPTIMIZER_DIVERGENCE" => "Remove terms that make the loss blow up, such as products of compartments.",
        "GENERATOR_ERROR" => "Transient generator failure; no change to the model is needed.",
        _ => "Simplify the term that triggered the failure.",
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMemory {
    /// Best first; at most `k` entries.
    pub population: Vec<Member>,
    pub errors: Vec<ErrorEntry>,
    pub reflection: String,
    pub snippets: Vec<Snippet>,
}

impl RunMemory {
    /// Inserts and keeps the `k` lowest `v`. Equal scores keep the earlier
    /// generation ahead. Returns whether `member` survived.
    pub fn insert(&mut self, member: Member, k: usize) -> bool {
        let g = member.g;
        self.population.push(member);
        self.population
            .sort_by(|a, b| a.v.total_cmp(&b.v).then(a.g.cmp(&b.g)));
        self.population.truncate(k);
        self.population.iter().any(|m| m.g == g)
    }

    pub fn find(&self, candidate: &Candidate) -> Option<&Member> {
        let key = candidate.normalized();
        self.population.iter().find(|m| m.candidate.normalized() == key)
    }

    pub fn best(&self) -> Option<&Member> {
        self.population.first()
    }

    pub fn record_error(&mut self, entry: ErrorEntry) {
        self.errors.push(entry);
    }

    /// Error log grouped by `(code, message)` in first-seen order, newest
    /// [`ERROR_RENDER_CAP`] groups in full. Empty when there are no errors.
    pub fn render_errors(&self) -> String {
        let mut groups: Vec<(&ErrorEntry, Vec<usize>)> = Vec::new();
        for e in &self.errors {
            match groups
                .iter_mut()
                .find(|(first, _)| first.code == e.code && first.message == e.message)
            {
                Some((_, gens)) => gens.push(e.g),
                None => groups.push((e, vec![e.g])),
            }
        }
        let mut out = String::new();
        let skipped = groups.len().saturating_sub(ERROR_RENDER_CAP);
        if skipped > 0 {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for (e, gens) in &groups[..skipped] {
                *counts.entry(&e.code).or_insert(0) += gens.len();
            }
            let summary: Vec<String> = counts.iter().map(|(c, n)| format!("{c} x{n}")).collect();
            let _ = writeln!(out, "- earlier failures: {}", summary.join(", "));
        }
        for (e, gens) in &groups[skipped..] {
            let gens: Vec<String> = gens.iter().map(|g| g.to_string()).collect();
            let count = if gens.len() > 1 {
                format!(" x{}", gens.len())
            } else {
                String::new()
            };
            let _ = writeln!(out, "- [{}]{count} (generation {}) {}", e.code, gens.join(", "), e.message);
            for line in e.excerpt.lines() {
                let _ = writeln!(out, "    {line}");
            }
            let _ = writeln!(out, "  fix: {}", e.fix);
        }
        out
    }

    /// Error codes seen at least twice, in code order.
    pub fn recurring_codes(&self) -> Vec<(String, usize)> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &self.errors {
            *counts.entry(&e.code).or_insert(0) += 1;
        }
        counts
            .into_iter()
            .filter(|(_, n)| *n >= 2)
            .map(|(c, n)| (c.to_string(), n))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::NetConfig;

    fn member(g: usize, v: f64) -> Member {
        Member {
            g,
            candidate: Candidate::new(format!("observe I # {g}"), NetConfig::default()),
            v,
        }
    }

    #[test]
    fn keeps_k_best_sorted() {
        let mut m = RunMemory::default();
        for (g, v) in [(1, 5.0), (2, 3.0), (3, 4.0), (4, 6.0)] {
            m.insert(member(g, v), 3);
        }
        let vs: Vec<f64> = m.population.iter().map(|x| x.v).collect();
        assert_eq!(vs, vec![3.0, 4.0, 5.0]);
        assert!(!m.insert(member(5, 9.0), 3));
    }

    #[test]
    fn ties_keep_the_earlier_generation() {
        let mut m = RunMemory::default();
        m.insert(member(1, 2.0), 1);
        assert!(!m.insert(member(2, 2.0), 1));
        assert_eq!(m.population[0].g, 1);
    }

    #[test]
    fn excerpt_is_five_lines_around_the_span() {
        let src = "a\nb\nc\nd\ne\nf\ng\n";
        let ex = excerpt(src, Some(Span::new(4, 1)));
        assert_eq!(ex.lines().count(), 5);
        assert!(ex.starts_with("  2 | b"));
        assert!(excerpt(src, Some(Span::new(1, 1))).lines().count() == 3);
    }

    #[test]
    fn repeated_errors_collapse_with_count() {
        let mut m = RunMemory::default();
        for g in [3, 7] {
            m.record_error(ErrorEntry::new(g, "PARSE_ERROR", "unexpected `->`", "flow S -> : x", Some(Span::new(1, 11))));
        }
        let text = m.render_errors();
        assert_eq!(text.matches("[PARSE_ERROR]").count(), 1);
        assert!(text.contains("[PARSE_ERROR] x2 (generation 3, 7)"));
        assert_eq!(m.recurring_codes(), vec![("PARSE_ERROR".to_string(), 2)]);
    }

    #[test]
    fn old_groups_collapse_past_the_cap() {
        let mut m = RunMemory::default();
        for g in 0..25 {
            m.record_error(ErrorEntry::new(g, "E1", &format!("undeclared `x{g}`"), "", None));
        }
        let text = m.render_errors();
        assert!(text.starts_with("- earlier failures: E1 x5\n"));
        assert_eq!(text.matches("[E1]").count(), ERROR_RENDER_CAP);
    }

    #[test]
    fn no_errors_renders_nothing() {
        assert_eq!(RunMemory::default().render_errors(), "");
    }
}
