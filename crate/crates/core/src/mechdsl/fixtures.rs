//! Reference models used by tests, scenarios and the cold-start generator.

/// Closed SEIRM with deaths as an absorbing compartment and incidence output.
pub const CANONICAL_SEIRM: &str = "\
model seirm
compartments S, E, I, R, M
params beta, alpha, gamma in [0, 0.8], delta in [0, 0.2], mor in [0, 0.2]
init S = N - 0.001 * N
init I = 0.001 * N
flow S -> E : foi() * S
flow E -> I : alpha * E
flow I -> R : gamma * I
flow I -> M : mor * I
flow R -> S : delta * R
observe alpha * E
";

/// Exposed individuals reach R through two unrelated parallel rates.
pub const DUAL_PATHWAY: &str = "\
model dual_pathway
compartments S, E, I, R, M
params beta, alpha, gamma, delta, kappa, epsilon, symprob, mor
init S = N - 0.001 * N
init I = 0.001 * N
flow S -> E : foi() * S
flow SOURCE -> E : epsilon
flow E -> I : kappa * symprob * E
flow E -> R : alpha * E
flow E -> R : kappa * (1 - symprob) * E
flow I -> R : gamma * I
flow I -> SINK : delta * I
flow I -> M : mor * I
observe kappa * symprob * E
";

/// A bounded rate is injected into E as an absolute per-step mass.
pub const ABSOLUTE_FLOW: &str = "\
model absolute_flow
compartments S, E, I, R, M
params beta, alpha, gamma, delta, kappa, mor
init S = N - 0.001 * N
init I = 0.001 * N
flow S -> E : foi() * S
flow SOURCE -> E : delta
flow E -> I : kappa * E
flow I -> R : gamma * I
flow I -> M : mor * I
flow R -> S : alpha * R
observe kappa * E
";
