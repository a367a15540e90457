//! The plan-and-execute loop: a Coder writes kernels, a Debugger plans
//! repairs and corrections, an Accelerator plans optimisations.

mod client;
mod episode;
mod memory;
mod parse;
mod prompts;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::task::OperatorCategory;
use crate::workspace::Stage;

pub use client::{ClientError, HttpClient, LlmClient, ScriptedClient, ENV_API_KEY, ENV_ENDPOINT, ENV_MODEL};
pub use episode::{
    masked_json, route, run_episode, Episode, EpisodeCandidate, EpisodeConfig, EpisodeError, EpisodeResult,
    Evaluator, PipelineEvaluator, Route, StopReason,
};
pub use memory::{ReflectiveMemory, SIMILAR_LIMIT};
pub use parse::{parse_candidate, parse_plan, CandidateParseError, PlanError};
pub use prompts::{
    build_acceleration_prompt, build_correction_prompt, build_initial_prompt, build_refinement_prompt,
    build_repair_prompt, candidate_format_reminder, file_instruction, plan_format_reminder, PromptBank, PromptError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlanKind {
    Repair,
    Correction,
    Acceleration,
}

impl PlanKind {
    /// Info string of the fenced block the plan is expected in.
    pub fn block_tag(self) -> &'static str {
        match self {
            PlanKind::Repair => "error_suggestion",
            PlanKind::Correction => "functionality_suggestion",
            PlanKind::Acceleration => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum AgentPlan {
    Repair {
        local_suggestions: Vec<String>,
        crossfile_suggestions: Vec<String>,
    },
    Correction {
        suggestions: Vec<String>,
    },
    Acceleration {
        bottleneck: String,
        method: String,
        plan: String,
    },
}

impl AgentPlan {
    pub fn kind(&self) -> PlanKind {
        match self {
            AgentPlan::Repair { .. } => PlanKind::Repair,
            AgentPlan::Correction { .. } => PlanKind::Correction,
            AgentPlan::Acceleration { .. } => PlanKind::Acceleration,
        }
    }
}

/// What produced an iteration's candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source")]
pub enum PlanSource {
    Initial,
    Plan { plan: AgentPlan },
    /// The planner's reply could not be parsed even after a re-ask.
    InvalidPlan { kind: PlanKind },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Outcome<T> {
    pub stage: Stage,
    pub max_abs_diff: Option<T>,
    pub latency_ms: Option<T>,
    pub speedup: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct HistoryEntry<T> {
    pub task_id: String,
    pub category: OperatorCategory,
    pub iteration: u32,
    pub plan: PlanSource,
    pub outcome: Outcome<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}
