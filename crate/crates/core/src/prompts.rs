//! Versioned prompt assets.

pub const AGENT_SYSTEM_PROMPT: &str = include_str!("../assets/agent_system_prompt.v1.txt");
pub const FEW_SHOTS: &str = include_str!("../assets/few_shots.v1.txt");
pub const DIRECT_QA_PROMPT: &str = include_str!("../assets/direct_qa_prompt.v1.txt");
pub const ONE_SHOT_PROMPT: &str = include_str!("../assets/one_shot_prompt.v1.txt");
pub const JUDGE_PROMPT: &str = include_str!("../assets/judge_prompt.v1.txt");
pub const PROMPT_VERSION: &str = "v1";

/// The system message sent to a remote policy: instructions, then exemplars.
pub fn agent_system_message() -> String {
    format!("{}\nExamples:\n\n{}", AGENT_SYSTEM_PROMPT, FEW_SHOTS)
}

pub fn render_judge_prompt(question: &str, gold: &str, answer: &str) -> String {
    JUDGE_PROMPT
        .replace("{question}", question)
        .replace("{gold}", gold)
        .replace("{answer}", answer)
}
