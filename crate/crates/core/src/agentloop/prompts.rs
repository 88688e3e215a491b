use std::fmt::Write;

use super::llm::ChatBackend;
use super::memory::RunMemory;
use crate::evalharness::{Cadence, SpatioTemporalDataset};
use crate::mechdsl::fixtures::CANONICAL_SEIRM;

pub const INSIGHTS_PROMPT: &str = "I am trying to build a mechanistic epidemic model that can simulate transmission dynamics and generate forecasting predictions for {cadence} infection counts.
Please read and analyze the dataset I provide, identify important structural patterns, temporal behaviors, and feature relationships, and then generate actionable modeling tips specific to how a model should be designed, parameterized, or modified to fit this dataset well.
Your tips may include suggestions on compartments, calibration strategies, seasonality, delays, under-reporting adjustment, spatial effects, or any dataset-specific phenomena you observe.

##Data

{string_data}

Please generate your tips after the ###TIPs:

E.g.,

###TIPs

Observation 1. [Your Observation 1 Here]

Tip 1. [Your Tip 1 Here]

Observation 2. [Your Observation 2 Here]

Tip 2. [Your Tip 2 Here]
...
";

pub const VERIFICATION_PROMPT: &str = "Convert the following code into differential equations and assess whether the equations are physically grounded (e.g., non-negative compartments, conservation where appropriate, realistic rates). Keep reasoning concise.

Description:

{code_description}

Code:

```nimm
{state_code}
```

Rate equations:

{equations}

Checks:
1) ODE correctness:
   - Derive explicit equations for each state and parameter.

2) Physical validity:
   - Non-negative compartments.
   - Conservation holds when appropriate.
   - Rates have valid signs and plausible roles.
   - No undefined dynamics (e.g., division by zero).

3) Semantic consistency:
   - States match the described compartments.
   - Flow directions align with meaning (e.g., recovery I -> R).
   - No missing or extra mechanisms relative to the description.
   - Parameters are used in their intended roles (e.g., beta infection, gamma recovery).
   - Observed vs latent states are not conflated.
   - Neural outputs (if any) are constrained and used consistently.

End your answer with a single line `VERDICT: accept` or `VERDICT: reject`.
";

pub const REFLECTION_PROMPT: &str = "You generated the following code completions (the parameter network feeds a simulator; only the parameter network is trainable). Analyze them rigorously to drive the validation loss (RMSE) below {target_loss}.

Records of the program after each iteration:```
{history}
```

Current top programs (lowest validation loss last):```
{completions}
```

{error_section}

Reflect step-by-step:
1. Diagnose weaknesses: For each program, explain why its validation loss (RMSE) isn't yet {target_loss} (look at structural choices, stability issues, etc.). If it is close to the target, you should also identify which features have contributed to the success.

2. Propose new designs: propose possible strategies that might drive the model to achieve lower validation loss.

3. Repair plan: Propose specific code-level changes that address those root causes, including adjustments to parameter network outputs, simulator couplings, or optimization targets. The plan must be actionable (e.g., \"replace the quadratic interaction in line X with ... so the flow matches the observed decay\").

4. Error handling (if present): For each failure listed above, pinpoint the bug and outline how to rewrite the affected section so it runs successfully next iteration.

- Do not write full code; give concise, prescriptive instructions tied to the observed data. This reflection will guide generation {iteration} of {generations}.
";

pub const ERROR_CORRECTION_PROMPT: &str = "Summarize code execution failures into concise bullets with key code fragments, error messages, and actionable fixes.

Condense the repeated failures below. For each, keep a short code excerpt, the core error message, and a specific fix.
{errors_text}

The following section record generations that failed to run in the history. Reflect on the error messages also and describe how to fix the corresponding code so it executes correctly:

############

{joined_errors}

############
";

const SKELETON_HEADER: &str = "# Fill in compartments, parameters, initial state, flows and the observation.
# Parameters are produced by the calibration network for every location and
# step and squashed into their declared interval (default [0, 1]).
# Available parameters: beta, alpha, gamma, delta, kappa, epsilon, symprob, mor.
# foi() = beta * (contact-weighted I) / (contact-weighted N); it requires a
# compartment named I. foi(x) uses x in place of beta.
# N is the location population. Initial masses must be built from N and
# literals and sum to N. SOURCE and SINK are outside the population.
# Every denominator must be guarded, e.g. x / max(y, 1e-8).
# Built-ins: foi, min, max, clamp. The simulator takes one Euler step per
# data step and clamps compartments at zero.
";

/// Replaces each `{key}` with its value.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

pub fn skeleton() -> String {
    format!("{SKELETON_HEADER}{CANONICAL_SEIRM}")
}

fn cadence_word(c: Cadence) -> &'static str {
    match c {
        Cadence::Day => "daily",
        Cadence::Week => "weekly",
    }
}

/// Task description filled from dataset metadata.
pub fn task_description(data: &SpatioTemporalDataset, horizon: usize) -> String {
    let pops: Vec<String> = data.population.iter().map(|p| format!("{p}")).collect();
    format!(
        "Write a metapopulation compartmental model in the model language for {l} locations \
         observed over {t} {cadence} steps. The calibration network reads the features [{features}] \
         and emits the declared parameters for every location and step. The observation expression \
         must reproduce the target `{target}` per location and step; it is scored by RMSE on {h}-step \
         forecasts from rolling training windows. Populations: [{pops}].",
        l = data.num_locations(),
        t = data.len(),
        cadence = cadence_word(data.cadence),
        features = data.feature_names.join(", "),
        target = data.target_name(),
        h = horizon,
        pops = pops.join(", "),
    )
}

/// The three parts of the system prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub insights: String,
    pub task: String,
    pub skeleton: String,
}

impl PromptBundle {
    pub fn new(insights: String, task: String) -> Self {
        Self {
            insights,
            task,
            skeleton: skeleton(),
        }
    }

    pub fn is_complete(&self) -> bool {
        !self.insights.trim().is_empty() && !self.task.trim().is_empty() && !self.skeleton.trim().is_empty()
    }

    pub fn system_prompt(&self) -> String {
        format!(
            "You design mechanistic epidemic models.\n\n## Task\n{}\n\n## Data insights\n{}\n\n## Skeleton\n```nimm\n{}```\n",
            self.task, self.insights, self.skeleton
        )
    }
}

/// User message for the modeling agent.
pub fn modeling_prompt(memory: &RunMemory, hybrid: bool) -> String {
    let mut out = String::new();
    if memory.population.is_empty() {
        out.push_str("## Current top programs\nNone yet.\n\n");
    } else {
        out.push_str("## Current top programs (lowest validation RMSE first)\n");
        for m in &memory.population {
            let _ = writeln!(out, "### generation {}, validation RMSE {:.4}\n{}", m.g, m.v, m.candidate.render());
        }
    }
    let errors = memory.render_errors();
    if !errors.is_empty() {
        let _ = writeln!(out, "## Failures so far\n{errors}");
    }
    if !memory.reflection.is_empty() {
        let _ = writeln!(out, "## Last reflection\n{}\n", memory.reflection);
    }
    if !memory.snippets.is_empty() {
        out.push_str("## Related models\n");
        for s in &memory.snippets {
            let _ = writeln!(out, "### {}\n```nimm\n{}```\n", s.id, s.text);
        }
    }
    out.push_str("Propose one new program that lowers the validation RMSE. Reply with the complete program in a ```nimm fenced block.");
    if hybrid {
        out.push_str(" You may add a ```config fenced block with `hidden = <1..256>` and `cell = gru|rnn` for the calibration network.");
    }
    out.push('\n');
    out
}

fn summary(values: &[f64]) -> (f64, f64, f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), min, max)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, sa, ..) = summary(a);
    let (mb, sb, ..) = summary(b);
    if sa < 1e-12 || sb < 1e-12 {
        return None;
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    Some(cov / (sa * sb))
}

fn feature_column(data: &SpatioTemporalDataset, f: usize) -> Vec<f64> {
    (0..data.num_locations())
        .flat_map(|l| (0..data.len()).map(move |t| (l, t)))
        .map(|(l, t)| data.get(l, t, f))
        .collect()
}

/// Head and tail rows per location plus per-feature summary statistics.
pub fn data_preview(data: &SpatioTemporalDataset, rows: usize) -> String {
    let mut out = format!("location,t,{}\n", data.feature_names.join(","));
    for l in 0..data.num_locations() {
        let t = data.len();
        let mut idx: Vec<usize> = (0..t.min(rows)).collect();
        idx.extend(t.saturating_sub(rows).max(rows.min(t))..t);
        for s in idx {
            let vals: Vec<String> = (0..data.num_features()).map(|f| format!("{:.4}", data.get(l, s, f))).collect();
            let _ = writeln!(out, "{l},{},{}", s + data.provenance.window_start, vals.join(","));
        }
    }
    out.push_str("\nfeature,mean,std,min,max\n");
    for (f, name) in data.feature_names.iter().enumerate() {
        let (mean, std, min, max) = summary(&feature_column(data, f));
        let _ = writeln!(out, "{name},{mean:.4},{std:.4},{min:.4},{max:.4}");
    }
    out
}

/// Deterministic summary: peak timing, recent trend, seasonality and
/// feature correlation with the target.
pub fn offline_insights(data: &SpatioTemporalDataset) -> String {
    let mut out = String::new();
    let t = data.len();
    let origin = data.provenance.window_start;
    let _ = writeln!(
        out,
        "Target `{}` over {} locations and {t} {} steps.",
        data.target_name(),
        data.num_locations(),
        cadence_word(data.cadence)
    );
    for l in 0..data.num_locations() {
        let series = data.target_series(l);
        let (peak_t, peak) = series
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let q = (t / 4).max(1);
        let recent = summary(&series[t.saturating_sub(q)..]).0;
        let before = summary(&series[t.saturating_sub(2 * q)..t.saturating_sub(q)]).0;
        let trend = if recent > 1.1 * before {
            "rising"
        } else if recent < 0.9 * before {
            "falling"
        } else {
            "flat"
        };
        let _ = writeln!(
            out,
            "Location {l}: peak {peak:.2} at t={}, recent trend {trend}.",
            peak_t + origin
        );
    }
    let lag = match data.cadence {
        Cadence::Week => 52,
        Cadence::Day => 7,
    };
    if t > 2 * lag {
        let mean_series: Vec<f64> = (0..t)
            .map(|s| (0..data.num_locations()).map(|l| data.get(l, s, data.target)).sum::<f64>())
            .collect();
        match pearson(&mean_series[lag..], &mean_series[..t - lag]) {
            Some(r) if r > 0.5 => {
                let _ = writeln!(out, "Seasonality: lag-{lag} autocorrelation {r:.2}; consider periodic transmission.");
            }
            Some(r) => {
                let _ = writeln!(out, "Seasonality: weak (lag-{lag} autocorrelation {r:.2}).");
            }
            None => {}
        }
    }
    if data.num_features() == 1 {
        out.push_str("Target-only data: no auxiliary features are available to the calibration network.\n");
    } else {
        let target = feature_column(data, data.target);
        let parts: Vec<String> = (0..data.num_features())
            .filter(|&f| f != data.target)
            .map(|f| {
                let name = &data.feature_names[f];
                match pearson(&feature_column(data, f), &target) {
                    Some(r) => format!("{name} {r:.2}"),
                    None => format!("{name} constant"),
                }
            })
            .collect();
        let _ = writeln!(out, "Correlation with target: {}.", parts.join(", "));
    }
    out
}

/// Insights from the endpoint when one is given, otherwise (or on failure)
/// the offline summary. The completion is cut after the `###TIPs` marker.
pub fn extract_insights(data: &SpatioTemporalDataset, llm: Option<&dyn ChatBackend>) -> String {
    let Some(llm) = llm else {
        return offline_insights(data);
    };
    let prompt = render(
        INSIGHTS_PROMPT,
        &[("cadence", cadence_word(data.cadence)), ("string_data", &data_preview(data, 5))],
    );
    match llm.complete("You are a data analyst for epidemic forecasting.", &prompt) {
        Ok(text) => match text.split_once("###TIPs") {
            Some((_, tips)) => tips.trim().to_string(),
            None => {
                log::warn!("insights completion has no ###TIPs marker; keeping it whole");
                text
            }
        },
        Err(e) => {
            log::warn!("insights endpoint failed ({e}); using offline summary");
            offline_insights(data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::error::Error;
    use crate::evalharness::{scenarios, synthesize, ContactSpec};

    #[test]
    fn offline_mentions_peak_time() {
        let (data, _) = synthesize(&scenarios::recovery(), 0).unwrap();
        let series = data.target_series(0);
        let peak_t = (0..series.len()).max_by(|&a, &b| series[a].total_cmp(&series[b])).unwrap();
        let text = offline_insights(&data);
        assert!(text.contains(&format!("Location 0: peak {:.2} at t={peak_t},", series[peak_t])), "{text}");
    }

    #[test]
    fn target_only_is_noted() {
        let data = SpatioTemporalDataset::new(
            Tensor::from_vec(vec![1.0, 3.0, 2.0]).reshape(vec![1, 3, 1]).unwrap(),
            vec!["cases".into()],
            0,
            Cadence::Week,
            vec![100.0],
            ContactSpec::identity(),
        )
        .unwrap();
        assert!(offline_insights(&data).contains("Target-only data"));
    }

    #[test]
    fn tips_marker_splits_completion() {
        let (data, _) = synthesize(&scenarios::recovery(), 0).unwrap();
        let llm = |_: &str, u: &str| -> crate::error::Result<String> {
            assert!(u.contains("location,t,cases"));
            Ok("thinking...\n###TIPs\nTip 1. Add waning.".to_string())
        };
        assert_eq!(extract_insights(&data, Some(&llm)), "Tip 1. Add waning.");
        let plain = |_: &str, _: &str| -> crate::error::Result<String> { Ok("no marker".into()) };
        assert_eq!(extract_insights(&data, Some(&plain)), "no marker");
        let down = |_: &str, _: &str| -> crate::error::Result<String> { Err(Error::Generator("down".into())) };
        assert_eq!(extract_insights(&data, Some(&down)), offline_insights(&data));
    }

    #[test]
    fn render_fills_placeholders() {
        assert_eq!(render("a {x} b {y} {x}", &[("x", "1"), ("y", "2")]), "a 1 b 2 1");
        let text = render(VERIFICATION_PROMPT, &[("code_description", "d"), ("state_code", "s"), ("equations", "e")]);
        assert!(!text.contains('{'));
    }

    #[test]
    fn bundle_is_complete_and_skeleton_parses() {
        let (data, _) = synthesize(&scenarios::recovery(), 0).unwrap();
        let bundle = PromptBundle::new(offline_insights(&data), task_description(&data, 8));
        assert!(bundle.is_complete());
        crate::mechdsl::parse(&bundle.skeleton).unwrap();
        assert!(bundle.system_prompt().contains("## Skeleton"));
    }
}
