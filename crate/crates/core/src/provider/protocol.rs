//! Request payloads and structured replies exchanged with chat backends.
//!
//! Every request is sent as a JSON user message after a task-specific system
//! prompt. Structured replies are parsed strictly: unknown fields, missing
//! fields or wrong verbs are protocol errors, never repaired.

use serde::{Deserialize, Serialize};

use crate::model::EffectiveTime;

/// What a chat call is for. The first four tasks expect a JSON reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Summarize,
    Consolidate,
    Decide,
    AgentAction,
    Rag,
    FinalAnswer,
}

impl Task {
    pub fn structured(self) -> bool {
        matches!(self, Task::Summarize | Task::Consolidate | Task::Decide | Task::AgentAction)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Summarize => "summarize",
            Task::Consolidate => "consolidate",
            Task::Decide => "decide",
            Task::AgentAction => "agent_action",
            Task::Rag => "rag",
            Task::FinalAnswer => "final_answer",
        }
    }

    /// Checks a reply against this task's output schema.
    pub fn validate(self, text: &str) -> Result<(), String> {
        fn check<T: for<'de> Deserialize<'de>>(text: &str) -> Result<(), String> {
            serde_json::from_str::<T>(text).map(|_| ()).map_err(|e| e.to_string())
        }
        match self {
            Task::Summarize => check::<SummariesOut>(text),
            Task::Consolidate => check::<ActionsOut>(text),
            Task::Decide => check::<DecisionOut>(text),
            Task::AgentAction => check::<AgentActionOut>(text),
            Task::Rag | Task::FinalAnswer => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnMessageIn {
    pub role: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarizeRequest {
    pub turn_id: String,
    pub session_id: String,
    pub messages: Vec<TurnMessageIn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposedKind {
    Profile,
    Event,
    EntityObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryOut {
    pub text: String,
    pub kind: ProposedKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummariesOut {
    pub summaries: Vec<SummaryOut>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    New,
    Existing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberIn {
    pub index: usize,
    pub origin: Origin,
    /// Node id for existing members, summary key for new ones.
    pub reference: String,
    pub content: String,
    pub effective_time: EffectiveTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidateRequest {
    pub members: Vec<MemberIn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Add,
    Update,
    Delete,
    Noop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionOut {
    pub member_index: usize,
    pub verb: Verb,
    pub target: Option<String>,
    pub new_content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionsOut {
    pub actions: Vec<ActionOut>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborIn {
    pub id: String,
    pub content: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecideRequest {
    pub candidate: String,
    pub neighbors: Vec<NeighborIn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionVerb {
    Add,
    Update,
    Noop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionOut {
    pub decision: DecisionVerb,
    pub target: Option<String>,
    pub new_content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepIn {
    pub action: String,
    pub args: serde_json::Value,
    pub result: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRequest {
    pub query: String,
    pub tools: Vec<String>,
    pub steps: Vec<StepIn>,
    /// Set on the repair reprompt after an unparseable action.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notice: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentActionOut {
    pub action: String,
    #[serde(default)]
    pub args: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagRequest {
    pub query: String,
    pub entries: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRequest {
    pub query: String,
    pub steps: Vec<StepIn>,
}

/// Default system prompts. Deployments may override them from config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    pub summarize: String,
    pub consolidate: String,
    pub decide: String,
    pub agent_action: String,
    pub rag: String,
    pub final_answer: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            summarize: "Summarize the dialogue turn into standalone factual memories. Prefix stable user \
                        attributes with [profile] and tracked objects with [object]. Reply as JSON \
                        {\"summaries\":[{\"text\":..,\"kind\":\"event|profile|entity_object\"}]}."
                .into(),
            consolidate: "You consolidate a cluster of memory items ordered by time. For every member emit \
                          exactly one action. New members: add or noop. Existing members: update, delete \
                          or noop. Reply as JSON {\"actions\":[{\"member_index\":..,\"verb\":..,\
                          \"target\":..,\"new_content\":..}]}."
                .into(),
            decide: "Decide whether the candidate memory is new (add), revises a neighbor (update) or is \
                     already known (noop). Reply as JSON {\"decision\":..,\"target\":..,\"new_content\":..}."
                .into(),
            agent_action: "You answer questions over long-term memory using tools. Reply with one JSON \
                           object {\"action\":..,\"args\":{..}}. Use finish when the evidence suffices."
                .into(),
            rag: "Write a grounded summary of the memory entries relevant to the query.".into(),
            final_answer: "Answer the query from the gathered observations.".into(),
        }
    }
}

impl PromptTemplates {
    pub fn for_task(&self, task: Task) -> &str {
        match task {
            Task::Summarize => &self.summarize,
            Task::Consolidate => &self.consolidate,
            Task::Decide => &self.decide,
            Task::AgentAction => &self.agent_action,
            Task::Rag => &self.rag,
            Task::FinalAnswer => &self.final_answer,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_validation() {
        assert!(Task::Consolidate
            .validate(r#"{"actions":[{"member_index":0,"verb":"add","target":null,"new_content":"x"}]}"#)
            .is_ok());
        assert!(Task::Consolidate.validate(r#"{"actions":[{"member_index":0,"verb":"merge"}]}"#).is_err());
        assert!(Task::Decide.validate(r#"{"decision":"add","target":null,"new_content":"x","extra":1}"#).is_err());
        assert!(Task::Summarize.validate("not json").is_err());
        assert!(Task::Rag.validate("anything").is_ok());
    }
}
