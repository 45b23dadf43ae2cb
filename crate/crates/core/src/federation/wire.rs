//! Newline-delimited JSON messages exchanged in a calibration round.
//!
//! Every real number travels twice: as a shortest round-trip decimal and as
//! a hex float. Decoders take the hex value and reject a mismatching
//! decimal. The sentinel threshold is the string `"inf"` in both fields.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::hexfloat::{from_hex, to_hex};
use crate::aggregation::{AggregatedThreshold, AggregationMethod};
use crate::calibration::AgentId;
use crate::error::{Error, Result};
use crate::threshold::{Threshold, SENTINEL_TEXT};

/// Upstream one-shot payload: `(q̂_k, n_k)` tagged with round and agent.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryMessage {
    pub round_id: String,
    pub agent_id: AgentId,
    pub q: Threshold,
    pub n: usize,
}

/// Downstream broadcast of the aggregated threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdMessage {
    pub round_id: String,
    pub method: AggregationMethod,
    pub q_hat: Threshold,
    pub alpha: f64,
    pub total_n: usize,
    pub agent_count: usize,
}

impl ThresholdMessage {
    pub fn new(round_id: &str, alpha: f64, aggregated: &AggregatedThreshold) -> Self {
        ThresholdMessage {
            round_id: round_id.to_string(),
            method: aggregated.method,
            q_hat: aggregated.q_hat,
            alpha,
            total_n: aggregated.total_n,
            agent_count: aggregated.agent_count,
        }
    }

    pub fn aggregated(&self) -> AggregatedThreshold {
        AggregatedThreshold {
            q_hat: self.q_hat,
            method: self.method,
            total_n: self.total_n,
            agent_count: self.agent_count,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMessage {
    pub round_id: String,
    pub code: String,
    pub detail: String,
}

/// One chunk of an agent's raw scores (pooled-score baseline only).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoresMessage {
    pub round_id: String,
    pub agent_id: AgentId,
    pub chunk: usize,
    pub of: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum WireMessage {
    Summary(SummaryMessage),
    Threshold(ThresholdMessage),
    Error(ErrorMessage),
    Scores(ScoresMessage),
}

impl WireMessage {
    pub fn type_name(&self) -> &'static str {
        match self {
            WireMessage::Summary(_) => "summary",
            WireMessage::Threshold(_) => "threshold",
            WireMessage::Error(_) => "error",
            WireMessage::Scores(_) => "scores",
        }
    }

    pub fn round_id(&self) -> &str {
        match self {
            WireMessage::Summary(m) => &m.round_id,
            WireMessage::Threshold(m) => &m.round_id,
            WireMessage::Error(m) => &m.round_id,
            WireMessage::Scores(m) => &m.round_id,
        }
    }
}

/// Decimal field: a JSON number, or `"inf"`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum Decimal {
    Number(f64),
    Text(String),
}

impl Decimal {
    fn of(value: f64) -> Decimal {
        if value.is_finite() {
            Decimal::Number(value)
        } else {
            Decimal::Text(SENTINEL_TEXT.to_string())
        }
    }
}

/// Hex field is authoritative; the decimal must agree with it bit for bit.
fn decode_real(field: &str, dec: &Decimal, hex: &str) -> Result<f64> {
    let value = from_hex(hex)?;
    let agrees = match dec {
        Decimal::Number(d) => d.to_bits() == value.to_bits(),
        Decimal::Text(t) => t == SENTINEL_TEXT && value == f64::INFINITY,
    };
    if !agrees {
        return Err(Error::Parse(format!("{field}: decimal {dec:?} disagrees with hex {hex:?}")));
    }
    Ok(value)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SummaryWire {
    #[serde(rename = "type")]
    kind: String,
    round_id: String,
    agent_id: AgentId,
    q: Decimal,
    q_hex: String,
    n: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThresholdWire {
    #[serde(rename = "type")]
    kind: String,
    round_id: String,
    method: AggregationMethod,
    q_hat: Decimal,
    q_hat_hex: String,
    alpha: f64,
    alpha_hex: String,
    total_n: usize,
    agent_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ErrorWire {
    #[serde(rename = "type")]
    kind: String,
    round_id: String,
    code: String,
    detail: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoresWire {
    #[serde(rename = "type")]
    kind: String,
    round_id: String,
    agent_id: AgentId,
    chunk: usize,
    of: usize,
    values: Vec<f64>,
    values_hex: Vec<String>,
}

/// Serializes a message as one JSON line, trailing newline included.
pub fn encode(message: &WireMessage) -> String {
    let kind = message.type_name().to_string();
    let json = match message {
        WireMessage::Summary(m) => serde_json::to_string(&SummaryWire {
            kind,
            round_id: m.round_id.clone(),
            agent_id: m.agent_id,
            q: Decimal::of(m.q.value()),
            q_hex: to_hex(m.q.value()),
            n: m.n,
        }),
        WireMessage::Threshold(m) => serde_json::to_string(&ThresholdWire {
            kind,
            round_id: m.round_id.clone(),
            method: m.method,
            q_hat: Decimal::of(m.q_hat.value()),
            q_hat_hex: to_hex(m.q_hat.value()),
            alpha: m.alpha,
            alpha_hex: to_hex(m.alpha),
            total_n: m.total_n,
            agent_count: m.agent_count,
        }),
        WireMessage::Error(m) => serde_json::to_string(&ErrorWire {
            kind,
            round_id: m.round_id.clone(),
            code: m.code.clone(),
            detail: m.detail.clone(),
        }),
        WireMessage::Scores(m) => serde_json::to_string(&ScoresWire {
            kind,
            round_id: m.round_id.clone(),
            agent_id: m.agent_id,
            chunk: m.chunk,
            of: m.of,
            values: m.values.clone(),
            values_hex: m.values.iter().map(|&v| to_hex(v)).collect(),
        }),
    }
    .expect("wire structs always serialize");
    json + "\n"
}

pub fn decode(line: &str) -> Result<WireMessage> {
    let value: Value = serde_json::from_str(line.trim_end())?;
    let kind = value
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Parse("message has no string \"type\" field".into()))?
        .to_string();
    let message = match kind.as_str() {
        "summary" => {
            let w: SummaryWire = serde_json::from_value(value)?;
            let q = Threshold::new(decode_real("q", &w.q, &w.q_hex)?)?;
            WireMessage::Summary(SummaryMessage { round_id: w.round_id, agent_id: w.agent_id, q, n: w.n })
        }
        "threshold" => {
            let w: ThresholdWire = serde_json::from_value(value)?;
            let q_hat = Threshold::new(decode_real("q_hat", &w.q_hat, &w.q_hat_hex)?)?;
            let alpha = decode_real("alpha", &Decimal::Number(w.alpha), &w.alpha_hex)?;
            WireMessage::Threshold(ThresholdMessage {
                round_id: w.round_id,
                method: w.method,
                q_hat,
                alpha,
                total_n: w.total_n,
                agent_count: w.agent_count,
            })
        }
        "error" => {
            let w: ErrorWire = serde_json::from_value(value)?;
            WireMessage::Error(ErrorMessage { round_id: w.round_id, code: w.code, detail: w.detail })
        }
        "scores" => {
            let w: ScoresWire = serde_json::from_value(value)?;
            if w.values.len() != w.values_hex.len() {
                return Err(Error::Parse("values and values_hex differ in length".into()));
            }
            let values = w
                .values
                .iter()
                .zip(&w.values_hex)
                .map(|(&d, h)| decode_real("values", &Decimal::Number(d), h))
                .collect::<Result<Vec<_>>>()?;
            WireMessage::Scores(ScoresMessage {
                round_id: w.round_id,
                agent_id: w.agent_id,
                chunk: w.chunk,
                of: w.of,
                values,
            })
        }
        other => return Err(Error::Parse(format!("unknown message type {other:?}"))),
    };
    if message.round_id().is_empty() {
        return Err(Error::Parse("empty round_id".into()));
    }
    Ok(message)
}
