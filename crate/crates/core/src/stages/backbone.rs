//! Backbone families: deterministic scripted rule tables and a generic
//! remote chat-completion client.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::canonical::count_tokens;
use crate::error::{Error, Result};

/// One scripted rule: first rule whose pattern is a substring of the prompt
/// wins. An empty pattern matches everything and serves as the fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub pattern: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_probs: Option<Vec<(String, f64)>>,
}

/// Deterministic scripted backbone: a pure function of the prompt.
#[derive(Debug, Clone)]
pub struct ScriptedBackbone {
    rules: Vec<Rule>,
}

impl ScriptedBackbone {
    /// Build from an ordered rule list. A fallback rule (empty pattern) is
    /// mandatory so the backbone is total over prompts.
    pub fn new(rules: Vec<Rule>) -> Result<Self> {
        if !rules.iter().any(|r| r.pattern.is_empty()) {
            return Err(Error::Config(
                "scripted backbone has no fallback rule (empty pattern)".to_string(),
            ));
        }
        Ok(ScriptedBackbone { rules })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let rules: Vec<Rule> =
            serde_json::from_str(json).map_err(|e| Error::Load(format!("rule file: {e}")))?;
        ScriptedBackbone::new(rules)
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    fn matched_rule(&self, prompt: &str) -> &Rule {
        self.rules
            .iter()
            .find(|r| r.pattern.is_empty() || prompt.contains(&r.pattern))
            .expect("fallback rule guarantees a match")
    }
}

/// Connection descriptor for a chat-completion HTTP endpoint.
#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model_name: String,
    pub api_key: String,
    pub reports_usage: bool,
    pub request_logprobs: bool,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

pub struct RemoteBackbone {
    cfg: RemoteConfig,
    client: reqwest::blocking::Client,
    in_flight: Gate,
}

/// Counting gate bounding concurrent remote requests.
struct Gate {
    capacity: usize,
    state: Mutex<usize>,
    cond: Condvar,
}

impl Gate {
    fn new(capacity: usize) -> Self {
        Gate { capacity: capacity.max(1), state: Mutex::new(0), cond: Condvar::new() }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut active = self.state.lock().expect("gate lock");
        while *active >= self.capacity {
            active = self.cond.wait(active).expect("gate wait");
        }
        *active += 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.gate.state.lock().expect("gate lock");
        *active -= 1;
        self.gate.cond.notify_one();
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    logprobs: bool,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
    #[serde(default)]
    logprobs: Option<ChatLogprobs>,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatLogprobs {
    #[serde(default)]
    content: Vec<ChatTokenLogprob>,
}

#[derive(Deserialize)]
struct ChatTokenLogprob {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl RemoteBackbone {
    pub fn new(cfg: RemoteConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let in_flight = Gate::new(cfg.max_in_flight);
        Ok(RemoteBackbone { cfg, client, in_flight })
    }

    fn complete(&self, prompt: &str) -> Result<Completion> {
        let _slot = self.in_flight.acquire();
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let body = ChatRequest {
            model: &self.cfg.model_name,
            messages: vec![ChatMessage { role: "user", content: prompt }],
            temperature: 0.0,
            logprobs: self.cfg.request_logprobs,
        };
        let response = self
            .client
            .post(&url)
            .bearer_auth(&self.cfg.api_key)
            .json(&body)
            .send()
            .map_err(|e| Error::Backbone {
                retryable: e.is_timeout() || e.is_connect() || e.is_request(),
                message: format!("transport: {e}"),
            })?;
        let status = response.status();
        if !status.is_success() {
            let retryable = status.is_server_error() || status.as_u16() == 429;
            return Err(Error::Backbone {
                retryable,
                message: format!("status {status} from {url}"),
            });
        }
        let parsed: ChatResponse = response.json().map_err(|e| Error::Backbone {
            retryable: false,
            message: format!("malformed response: {e}"),
        })?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| Error::Backbone {
            retryable: false,
            message: "malformed response: no choices".to_string(),
        })?;
        let text = choice.message.content;
        let token_probs = choice.logprobs.map(|lp| {
            lp.content.into_iter().map(|t| (t.token, t.logprob.exp())).collect::<Vec<_>>()
        });
        let (tokens_in, tokens_out) = match (&parsed.usage, self.cfg.reports_usage) {
            (Some(u), true) => (u.prompt_tokens, u.completion_tokens),
            _ => (count_tokens(prompt), count_tokens(&text)),
        };
        Ok(Completion { text, token_probs, tokens_in, tokens_out })
    }
}

/// One backbone completion: response text, optional per-token probability
/// annotations, and token usage.
#[derive(Debug, Clone)]
pub struct Completion {
    pub text: String,
    pub token_probs: Option<Vec<(String, f64)>>,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

pub enum Backbone {
    Scripted(ScriptedBackbone),
    Remote(RemoteBackbone),
}

impl Backbone {
    /// Resolve the prompt to a completion. Scripted backbones always report
    /// their annotation list (possibly empty): probability support is a
    /// property of the family, not the individual rule.
    pub fn complete(&self, prompt: &str) -> Result<Completion> {
        match self {
            Backbone::Scripted(sb) => {
                let rule = sb.matched_rule(prompt);
                Ok(Completion {
                    text: rule.response.clone(),
                    token_probs: Some(rule.token_probs.clone().unwrap_or_default()),
                    tokens_in: count_tokens(prompt),
                    tokens_out: count_tokens(&rule.response),
                })
            }
            Backbone::Remote(rb) => rb.complete(prompt),
        }
    }

    pub fn is_scripted(&self) -> bool {
        matches!(self, Backbone::Scripted(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rules() -> Vec<Rule> {
        vec![
            Rule {
                pattern: "capital of France".into(),
                response: "PLAN: retrieve then answer".into(),
                token_probs: None,
            },
            Rule {
                pattern: "annotated".into(),
                response: "FINAL: Paris".into(),
                token_probs: Some(vec![("Paris".into(), 0.9)]),
            },
            Rule { pattern: String::new(), response: "FINAL: unknown".into(), token_probs: None },
        ]
    }

    #[test]
    fn first_match_over_patterns() {
        let b = Backbone::Scripted(ScriptedBackbone::new(rules()).unwrap());
        let c = b.complete("QUERY: what is the capital of France").unwrap();
        assert_eq!(c.text, "PLAN: retrieve then answer");
    }

    #[test]
    fn fallback_rule_is_mandatory() {
        let missing = vec![Rule {
            pattern: "x".into(),
            response: "y".into(),
            token_probs: None,
        }];
        assert!(ScriptedBackbone::new(missing).is_err());
    }

    #[test]
    fn scripted_is_pure() {
        let b = Backbone::Scripted(ScriptedBackbone::new(rules()).unwrap());
        let a = b.complete("no rule matches this").unwrap();
        let c = b.complete("no rule matches this").unwrap();
        assert_eq!(a.text, c.text);
        assert_eq!(a.text, "FINAL: unknown");
        assert_eq!((a.tokens_in, a.tokens_out), (c.tokens_in, c.tokens_out));
    }

    #[test]
    fn annotations_surface_in_completion() {
        let b = Backbone::Scripted(ScriptedBackbone::new(rules()).unwrap());
        let c = b.complete("annotated prompt").unwrap();
        assert_eq!(c.token_probs, Some(vec![("Paris".to_string(), 0.9)]));
    }

    #[test]
    fn scripted_usage_uses_whitespace_counter() {
        let b = Backbone::Scripted(ScriptedBackbone::new(rules()).unwrap());
        let c = b.complete("one two three").unwrap();
        assert_eq!(c.tokens_in, 3);
        assert_eq!(c.tokens_out, 2); // "FINAL: unknown"
    }
}
