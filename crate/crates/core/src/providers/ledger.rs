use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{Completion, LlmProvider, LlmUsage, ProviderError, Role};

/// USD per one million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Price {
    pub input_per_1m: f64,
    pub output_per_1m: f64,
}

impl Price {
    pub const LLAMA_2_7B: Price = Price { input_per_1m: 0.05, output_per_1m: 0.25 };
    pub const LLAMA_3_1_8B: Price = Price { input_per_1m: 0.10, output_per_1m: 0.10 };
    pub const GPT_4O_MINI: Price = Price { input_per_1m: 0.15, output_per_1m: 0.60 };

    pub fn named(name: &str) -> Option<Price> {
        match name.to_ascii_lowercase().as_str() {
            "llama-2-7b" => Some(Price::LLAMA_2_7B),
            "llama-3.1-8b" => Some(Price::LLAMA_3_1_8B),
            "gpt-4o-mini" => Some(Price::GPT_4O_MINI),
            _ => None,
        }
    }

    pub fn cost(&self, usage: &LlmUsage) -> f64 {
        (usage.prompt_tokens as f64 * self.input_per_1m + usage.completion_tokens as f64 * self.output_per_1m) / 1e6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub specialized: Price,
    pub general: Price,
}

impl Default for PriceTable {
    fn default() -> Self {
        PriceTable { specialized: Price::LLAMA_2_7B, general: Price::GPT_4O_MINI }
    }
}

impl PriceTable {
    pub fn for_role(&self, role: Role) -> Price {
        match role {
            Role::Specialized => self.specialized,
            Role::General => self.general,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: Role,
    pub usage: LlmUsage,
}

/// Append-only call log. Appends are lock-guarded so one ledger can be
/// shared between threads.
#[derive(Debug, Default)]
pub struct CostLedger {
    records: Mutex<Vec<CallRecord>>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, role: Role, usage: LlmUsage) {
        self.records.lock().expect("ledger lock").push(CallRecord { role, usage });
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.records.lock().expect("ledger lock").clone()
    }

    pub fn calls(&self) -> usize {
        self.records.lock().expect("ledger lock").len()
    }

    pub fn calls_by(&self, role: Role) -> usize {
        self.records.lock().expect("ledger lock").iter().filter(|r| r.role == role).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub questions: usize,
    pub total_calls: usize,
    pub avg_calls: f64,
    pub avg_prompt_tokens: f64,
    pub avg_completion_tokens: f64,
    pub avg_tokens: f64,
    pub total_cost_usd: f64,
    pub cost_per_10k_usd: f64,
}

/// Averages over `question_count` questions; all zeros when it is zero.
pub fn ledger_summary(records: &[CallRecord], prices: &PriceTable, question_count: usize) -> LedgerSummary {
    let total_cost: f64 = records.iter().map(|r| prices.for_role(r.role).cost(&r.usage)).sum();
    let prompt: u64 = records.iter().map(|r| r.usage.prompt_tokens).sum();
    let completion: u64 = records.iter().map(|r| r.usage.completion_tokens).sum();
    let per = |x: f64| if question_count == 0 { 0.0 } else { x / question_count as f64 };
    LedgerSummary {
        questions: question_count,
        total_calls: records.len(),
        avg_calls: per(records.len() as f64),
        avg_prompt_tokens: per(prompt as f64),
        avg_completion_tokens: per(completion as f64),
        avg_tokens: per((prompt + completion) as f64),
        total_cost_usd: total_cost,
        cost_per_10k_usd: per(total_cost) * 10_000.0,
    }
}

/// A provider bound to a role and temperature that logs every successful
/// call into a ledger.
#[derive(Clone)]
pub struct MeteredLlm {
    provider: Arc<dyn LlmProvider>,
    role: Role,
    temperature: f64,
    ledger: Arc<CostLedger>,
}

impl MeteredLlm {
    pub fn new(provider: Arc<dyn LlmProvider>, role: Role, temperature: f64, ledger: Arc<CostLedger>) -> Self {
        MeteredLlm { provider, role, temperature, ledger }
    }

    pub fn call(&self, prompt: &str) -> Result<Completion, ProviderError> {
        let out = self.provider.complete(prompt, self.temperature)?;
        self.ledger.record(self.role, out.usage);
        Ok(out)
    }

    pub fn ledger(&self) -> &Arc<CostLedger> {
        &self.ledger
    }
}
