//! Tool-routing agent for interactive recommendation episodes.
//!
//! An episode hands the agent a target user and 20 fixed candidates, one of
//! which is a hidden held-out positive. The agent gathers evidence by calling
//! tools from a small library, writes each structured result into an
//! append-only memory, and finally calls `CandidateRank` to emit a ranking.
//!
//! Module map:
//!
//! - [`corpus`]: read-only world data (users, items, interactions, reviews).
//! - [`environment`]: episode construction, scenario labels, distribution-matched
//!   task selection and synthetic oracle worlds.
//! - [`toolkit`]: tool specs, the facets+confidence output schema, the heuristic
//!   and provider backends, and the capability-scoped corpus view.
//! - [`executor`]: the observe-decide-act loop, feasibility masks, trajectories
//!   and replay.
//! - [`planner`]: routing policies, SFT and DPO training, preference pairs and
//!   the brute-force plan oracle.
//! - [`mining`]: trace filtering, step normalization, embeddings, k-means and
//!   the cluster-to-tool mapping.
//! - [`eval`]: hit-rate metrics and run reports.
//! - [`cli`]: the operator command surface used by the `agentrec` binary.

pub mod cli;
pub mod corpus;
pub mod environment;
pub mod eval;
pub mod executor;
pub mod io;
pub mod mining;
pub mod planner;
pub mod provider;
pub mod rng;
pub mod toolkit;

pub use corpus::{Corpus, Domain};
pub use environment::{Episode, Scenario};
pub use executor::{AgentState, ExecConfig, Trajectory};
pub use toolkit::{ToolName, ToolOutput};
