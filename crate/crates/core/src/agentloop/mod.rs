//! The model-search loop.
//!
//! Each generation retrieves snippets using the last reflection as the query,
//! asks a [`CandidateGenerator`] for a program, gates it through the parser,
//! the static verifier and an optional judge, scores it with rolling-origin
//! evaluation, and writes a reflection for the next round. The best `k`
//! programs and every failure are kept in [`RunMemory`].

mod candidate;
mod evolve;
mod gate;
mod generator;
mod llm;
mod memory;
mod prompts;
mod reflect;
mod retrieval;

pub use candidate::{extract_candidate, parse_candidate, parse_config, render_config, Candidate, MAX_HIDDEN};
pub use evolve::{
    evaluate_candidate, evolve, validation_split, Agents, BestRecord, BugBreakdown, Curve, EvolveConfig,
    EvolveOutcome, EvolveReport, Mode,
};
pub use gate::{judge_rejects, verify_candidate, Rejection, Verdict};
pub use generator::{CandidateGenerator, LlmGenerator, MutationGenerator, Proposal};
pub use llm::{ChatBackend, LlmClient, LlmConfig, ENV_API_KEY, ENV_BASE_URL, ENV_MODEL};
pub use memory::{excerpt, suggest_fix, ErrorEntry, Member, RunMemory, ERROR_RENDER_CAP};
pub use prompts::{
    data_preview, extract_insights, modeling_prompt, offline_insights, render, skeleton, task_description,
    PromptBundle, ERROR_CORRECTION_PROMPT, INSIGHTS_PROMPT, REFLECTION_PROMPT, VERIFICATION_PROMPT,
};
pub use reflect::{format_v, offline_reflection, reflect, structural_diff, Outcome, ReflectContext};
pub use retrieval::{tokenize, Snippet, SnippetStore};
