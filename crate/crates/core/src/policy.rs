//! Pluggable policies: scripted replies for tests and a remote text
//! generation service.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::EpisodeRng;
use crate::generation::{GenerationClient, GenerationError, GenerationRequest, Message};
use crate::protocol::{
    serialize_state, Trajectory, ANSWER_CLOSE, ANSWER_OPEN, QUERY_CLOSE, QUERY_OPEN,
};

/// What a policy sees when asked for its next turn.
pub struct PolicyContext<'a> {
    pub trajectory: &'a Trajectory,
    /// The serialized state including the environment's system prompt.
    pub state_text: &'a str,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("script exhausted after {0} replies")]
    Exhausted(usize),
    #[error(transparent)]
    Transport(#[from] GenerationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
}

impl DecodingParams {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            max_new_tokens: 512,
        }
    }

    /// The single-query baseline's sampling setting.
    pub fn one_shot() -> Self {
        Self {
            temperature: 0.2,
            top_p: 0.95,
            max_new_tokens: 512,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            ));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be positive".into());
        }
        Ok(())
    }
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self::greedy()
    }
}

pub trait Policy {
    fn generate(
        &mut self,
        ctx: &PolicyContext<'_>,
        rng: &mut EpisodeRng,
    ) -> Result<String, PolicyError>;

    fn supports_sampling(&self) -> bool {
        false
    }

    fn set_decoding(&mut self, _params: DecodingParams) {}
}

/// Replays fixed replies in order.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    script: Vec<String>,
    next: usize,
}

impl ScriptedPolicy {
    pub fn new(script: Vec<String>) -> Self {
        Self { script, next: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.script.len() - self.next
    }
}

impl Policy for ScriptedPolicy {
    fn generate(
        &mut self,
        _ctx: &PolicyContext<'_>,
        _rng: &mut EpisodeRng,
    ) -> Result<String, PolicyError> {
        let reply = self
            .script
            .get(self.next)
            .cloned()
            .ok_or(PolicyError::Exhausted(self.script.len()))?;
        self.next += 1;
        Ok(reply)
    }
}

/// Asks a text-generation service for each turn.
#[derive(Debug, Clone)]
pub struct RemotePolicy {
    client: GenerationClient,
    system_message: String,
    params: DecodingParams,
}

pub const STOP_SEQUENCES: [&str; 2] = [QUERY_CLOSE, ANSWER_CLOSE];

impl RemotePolicy {
    /// `system_message` should already contain any few-shot exemplars.
    pub fn new(
        client: GenerationClient,
        system_message: impl Into<String>,
        params: DecodingParams,
    ) -> Self {
        Self {
            client,
            system_message: system_message.into(),
            params,
        }
    }

    pub fn params(&self) -> DecodingParams {
        self.params
    }

    pub fn build_request(&self, traj: &Trajectory, seed: u64) -> GenerationRequest {
        let (state, _) = serialize_state(traj, "");
        GenerationRequest {
            messages: vec![
                Message::new("system", self.system_message.clone()),
                Message::new("user", state),
            ],
            temperature: self.params.temperature,
            top_p: self.params.top_p,
            max_tokens: self.params.max_new_tokens,
            stop: STOP_SEQUENCES.iter().map(|s| s.to_string()).collect(),
            seed: Some(seed),
        }
    }
}

/// Servers usually drop the matched stop sequence; put it back.
pub fn restore_stop_sequence(mut text: String) -> String {
    for (open, close) in [(QUERY_OPEN, QUERY_CLOSE), (ANSWER_OPEN, ANSWER_CLOSE)] {
        if let Some(i) = text.rfind(open) {
            if !text[i..].contains(close) {
                text.push_str(close);
            }
        }
    }
    text
}

impl Policy for RemotePolicy {
    fn generate(
        &mut self,
        ctx: &PolicyContext<'_>,
        rng: &mut EpisodeRng,
    ) -> Result<String, PolicyError> {
        let req = self.build_request(ctx.trajectory, rng.next_u64());
        Ok(restore_stop_sequence(self.client.generate(&req)?))
    }

    fn supports_sampling(&self) -> bool {
        true
    }

    fn set_decoding(&mut self, params: DecodingParams) {
        self.params = params;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::episode_rng;

    #[test]
    fn scripted_in_order_then_exhausted() {
        let t = Trajectory::new("q", "?");
        let ctx = PolicyContext {
            trajectory: &t,
            state_text: "",
        };
        let mut rng = episode_rng(0);
        let mut p = ScriptedPolicy::new(vec!["a".into(), "b".into()]);
        assert_eq!(p.generate(&ctx, &mut rng).unwrap(), "a");
        assert_eq!(p.generate(&ctx, &mut rng).unwrap(), "b");
        assert_eq!(p.generate(&ctx, &mut rng), Err(PolicyError::Exhausted(2)));
    }

    #[test]
    fn stop_sequence_restored_once() {
        assert_eq!(
            restore_stop_sequence("<think>x</think><query>ASK {}".into()),
            "<think>x</think><query>ASK {}</query>"
        );
        assert_eq!(
            restore_stop_sequence("<think>x</think><answer>a</answer>".into()),
            "<think>x</think><answer>a</answer>"
        );
        assert_eq!(restore_stop_sequence("plain".into()), "plain");
    }

    #[test]
    fn decoding_validation() {
        assert!(DecodingParams::one_shot().validate().is_ok());
        assert!(DecodingParams {
            top_p: 0.0,
            ..DecodingParams::greedy()
        }
        .validate()
        .is_err());
        assert!(DecodingParams {
            temperature: -1.0,
            ..DecodingParams::greedy()
        }
        .validate()
        .is_err());
    }
}
