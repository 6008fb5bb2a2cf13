//! Bounded ReAct loop over the memory tools.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::tools::{self, ToolError, VlmBackend, FINISH, TOOL_NAMES, VIDEO_QA, VIDEO_RAG, VIDEO_RETRIEVAL};
use super::ReadConfig;
use crate::model::ClipRange;
use crate::pipeline::GraphHandle;
use crate::provider::protocol::{AgentActionOut, AgentRequest, FinalRequest, StepIn};
use crate::provider::{Provider, ProviderError, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStep {
    pub action: String,
    pub args: Value,
    /// Tool output, or `error: ...` when the tool failed.
    pub observation: String,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentHistory {
    pub initial_query: String,
    pub steps: Vec<AgentStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentOutcome {
    pub answer: String,
    pub history: AgentHistory,
    /// Action-selection calls, reprompt included; the final call is extra.
    pub action_calls: usize,
    pub reprompted: bool,
    pub finished_early: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("agent action unparseable after reprompt: {message}")]
    Protocol { message: String, payload: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// A parsed, validated tool invocation.
#[derive(Debug, Clone, PartialEq)]
enum Action {
    Finish,
    Retrieval { query: String },
    Rag { query: String },
    Qa { question: String, asset: Option<String>, range: ClipRange },
}

fn str_arg(args: &Value, key: &str) -> Result<String, String> {
    args.get(key).and_then(Value::as_str).map(str::to_string).ok_or_else(|| format!("missing string argument `{key}`"))
}

fn num_arg(args: &Value, key: &str) -> Result<f64, String> {
    args.get(key).and_then(Value::as_f64).ok_or_else(|| format!("missing numeric argument `{key}`"))
}

fn parse_action(out: &AgentActionOut) -> Result<Action, String> {
    let args = &out.args;
    if !(args.is_object() || args.is_null()) {
        return Err("args must be an object".into());
    }
    match out.action.as_str() {
        FINISH => Ok(Action::Finish),
        VIDEO_RETRIEVAL => Ok(Action::Retrieval { query: str_arg(args, "query")? }),
        VIDEO_RAG => Ok(Action::Rag { query: str_arg(args, "query")? }),
        VIDEO_QA => Ok(Action::Qa {
            question: str_arg(args, "question").or_else(|_| str_arg(args, "query"))?,
            asset: args.get("asset").and_then(Value::as_str).map(str::to_string),
            range: ClipRange::new(num_arg(args, "start_s")?, num_arg(args, "end_s")?),
        }),
        other => Err(format!("unknown action `{other}`")),
    }
}

pub struct Agent<'a, H: GraphHandle> {
    pub graph: &'a H,
    pub provider: &'a Provider,
    pub vlm: Option<Arc<dyn VlmBackend>>,
    pub cfg: ReadConfig,
}

impl<'a, H: GraphHandle> Agent<'a, H> {
    pub fn new(graph: &'a H, provider: &'a Provider, cfg: ReadConfig) -> Self {
        Agent { graph, provider, vlm: None, cfg }
    }

    pub fn with_vlm(mut self, vlm: Arc<dyn VlmBackend>) -> Self {
        self.vlm = Some(vlm);
        self
    }

    fn dispatch(&self, action: &Action) -> Result<String, ToolError> {
        match action {
            Action::Finish => unreachable!("finish is handled by the loop"),
            Action::Retrieval { query } => {
                let q = self.provider.embed_one(query)?;
                let hits = self.graph.read(|g| tools::video_retrieval(g, &q, self.cfg.retrieval_k))?;
                if hits.is_empty() {
                    return Ok("no clips found".into());
                }
                Ok(hits
                    .iter()
                    .map(|h| {
                        format!(
                            "{} [{:.2}, {:.2}] node={} score={:.3}",
                            h.asset.as_deref().unwrap_or("-"),
                            h.start_s,
                            h.end_s,
                            h.node_id,
                            h.score
                        )
                    })
                    .collect::<Vec<_>>()
                    .join("\n"))
            }
            Action::Rag { query } => {
                let empty = self.graph.read(|g| g.index().is_empty());
                let entries = if empty {
                    None
                } else {
                    let q = self.provider.embed_one(query)?;
                    self.graph.read(|g| tools::rag_entries(g, &q, self.cfg.rag_k))?
                };
                tools::video_rag(self.provider, query, entries)
            }
            Action::Qa { question, asset, range } => {
                tools::video_qa(self.vlm.as_deref(), asset.as_deref(), question, *range)
            }
        }
    }

    /// Runs at most `max_iterations` action calls (one more if a reprompt
    /// was needed) and then one final-answer call.
    pub fn run(&self, query: &str) -> Result<AgentOutcome, AgentError> {
        let mut history = AgentHistory { initial_query: query.to_string(), steps: Vec::new() };
        let mut notice = None;
        let mut reprompted = false;
        let mut action_calls = 0;
        let mut iterations = 0;
        let mut finished_early = false;
        while iterations < self.cfg.max_iterations {
            let req = AgentRequest {
                query: query.to_string(),
                tools: TOOL_NAMES.iter().map(|s| s.to_string()).chain([FINISH.to_string()]).collect(),
                steps: steps_in(&history),
                notice: notice.take(),
            };
            action_calls += 1;
            let parsed = match self.provider.chat_json::<AgentActionOut>(Task::AgentAction, &req) {
                Ok(out) => match parse_action(&out) {
                    Ok(a) => Ok((out, a)),
                    Err(m) => Err((m, serde_json::to_string(&out).unwrap_or_default())),
                },
                Err(ProviderError::Protocol { message, payload }) => Err((message, payload)),
                Err(e) => return Err(e.into()),
            };
            let (out, action) = match parsed {
                Ok(v) => v,
                Err((message, payload)) => {
                    if reprompted {
                        return Err(AgentError::Protocol { message, payload });
                    }
                    reprompted = true;
                    notice = Some(format!("Your previous reply was not a valid action ({message}). Reply with one JSON action."));
                    continue;
                }
            };
            iterations += 1;
            if action == Action::Finish {
                finished_early = true;
                break;
            }
            let (observation, failed) = match self.dispatch(&action) {
                Ok(text) => (text, false),
                Err(e) => (format!("error: {e}"), true),
            };
            history.steps.push(AgentStep { action: out.action, args: out.args, observation, failed });
        }
        let answer = self
            .provider
            .chat_text(Task::FinalAnswer, &FinalRequest { query: query.to_string(), steps: steps_in(&history) })?;
        Ok(AgentOutcome { answer, history, action_calls, reprompted, finished_early })
    }
}

fn steps_in(history: &AgentHistory) -> Vec<StepIn> {
    history
        .steps
        .iter()
        .map(|s| StepIn { action: s.action.clone(), args: s.args.clone(), result: s.observation.clone() })
        .collect()
}
