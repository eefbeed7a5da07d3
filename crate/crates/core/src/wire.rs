//! Newline-delimited provider protocol.
//!
//! Every message is one line `KIND {json}`:
//!
//! ```text
//! provider -> HELLO {"task_id":..,"provider_id":..}
//! aggregator -> CHALLENGE {"nonce":..}
//! provider -> SUBMIT {"task_id":..,"provider_id":..,"nonce":..,"predictions":[..],"auth_tag":..}
//! aggregator -> ACK {"accepted":..,"reason":..}
//! aggregator -> RESULT {"task_id":..,"digest":..,"sealed":..}
//! ```
//!
//! SUBMIT bodies must be in canonical form. Anything that does not parse,
//! is not canonical, or names another provider than the one bound by HELLO
//! is answered with `bad_auth_tag`.

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::id::Id;
use crate::serving::{SealedResult, Submission, SubmitError, TaskSession};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub task_id: Id,
    pub provider_id: Id,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Challenge {
    pub nonce: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ack {
    pub accepted: bool,
    pub reason: String,
}

impl Ack {
    pub fn ok() -> Self {
        Ack {
            accepted: true,
            reason: "ok".into(),
        }
    }

    pub fn reject(reason: &str) -> Self {
        Ack {
            accepted: false,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultMsg {
    pub task_id: Id,
    pub digest: String,
    pub sealed: String,
}

impl ResultMsg {
    pub fn from_sealed(r: &SealedResult) -> Self {
        ResultMsg {
            task_id: r.task_id.clone(),
            digest: r.digest.clone(),
            sealed: base64::engine::general_purpose::STANDARD.encode(&r.envelope),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    Challenge(Challenge),
    Submit(Submission),
    Ack(Ack),
    Result(ResultMsg),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("line has no message kind")]
    MissingKind,
    #[error("unknown message kind {0:?}")]
    UnknownKind(String),
    #[error("malformed {kind} body: {reason}")]
    Malformed { kind: &'static str, reason: String },
    #[error("SUBMIT body is not in canonical form")]
    NonCanonical,
}

/// Canonical SUBMIT body: the signed bytes with the tag appended.
pub fn submit_body(s: &Submission) -> String {
    let signed = s.signed_bytes();
    format!("{},\"auth_tag\":\"{}\"}}", &signed[..signed.len() - 1], s.auth_tag)
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("wire messages serialize")
}

pub fn encode(m: &Message) -> String {
    match m {
        Message::Hello(h) => format!("HELLO {}", json(h)),
        Message::Challenge(c) => format!("CHALLENGE {}", json(c)),
        Message::Submit(s) => format!("SUBMIT {}", submit_body(s)),
        Message::Ack(a) => format!("ACK {}", json(a)),
        Message::Result(r) => format!("RESULT {}", json(r)),
    }
}

fn parse<T: serde::de::DeserializeOwned>(kind: &'static str, body: &str) -> Result<T, WireError> {
    serde_json::from_str(body).map_err(|e| WireError::Malformed {
        kind,
        reason: e.to_string(),
    })
}

pub fn decode(line: &str) -> Result<Message, WireError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let (kind, body) = line.split_once(' ').ok_or(WireError::MissingKind)?;
    match kind {
        "HELLO" => parse("HELLO", body).map(Message::Hello),
        "CHALLENGE" => parse("CHALLENGE", body).map(Message::Challenge),
        "SUBMIT" => {
            let s: Submission = parse("SUBMIT", body)?;
            if submit_body(&s) != body {
                return Err(WireError::NonCanonical);
            }
            Ok(Message::Submit(s))
        }
        "ACK" => parse("ACK", body).map(Message::Ack),
        "RESULT" => parse("RESULT", body).map(Message::Result),
        "" => Err(WireError::MissingKind),
        other => Err(WireError::UnknownKind(other.to_string())),
    }
}

/// Per-connection protocol state on the aggregator side.
#[derive(Debug, Default, Clone)]
pub struct Connection {
    bound: Option<Id>,
}

impl Connection {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bound_provider(&self) -> Option<&Id> {
        self.bound.as_ref()
    }

    /// Handles one inbound line and returns the reply line.
    pub fn handle_line(&mut self, session: &mut TaskSession, line: &str) -> String {
        encode(&self.handle(session, line))
    }

    /// Like [`Connection::handle_line`] for raw bytes; lines that are not
    /// UTF-8 are rejected like any other malformed line.
    pub fn handle_bytes(&mut self, session: &mut TaskSession, line: &[u8]) -> String {
        match std::str::from_utf8(line) {
            Ok(s) => self.handle_line(session, s),
            Err(_) if line.starts_with(b"SUBMIT ") => encode(&Message::Ack(Ack::reject(SubmitError::BadAuthTag.reason()))),
            Err(_) => encode(&Message::Ack(Ack::reject("malformed"))),
        }
    }

    fn handle(&mut self, session: &mut TaskSession, line: &str) -> Message {
        let reject = |r: &str| Message::Ack(Ack::reject(r));
        let is_submit = line.starts_with("SUBMIT ");
        let msg = match decode(line) {
            Ok(m) => m,
            Err(_) if is_submit => return reject(SubmitError::BadAuthTag.reason()),
            Err(_) => return reject("malformed"),
        };
        match msg {
            Message::Hello(h) => {
                if &h.task_id != session.task_id() {
                    return reject("unknown_task");
                }
                match session.issue_challenge(&h.provider_id) {
                    Ok(nonce) => {
                        self.bound = Some(h.provider_id);
                        Message::Challenge(Challenge { nonce })
                    }
                    Err(crate::serving::ServingError::UnknownProvider(_)) => reject("unknown_provider"),
                    Err(_) => reject("closed"),
                }
            }
            Message::Submit(s) => {
                let Some(bound) = &self.bound else {
                    return reject("no_hello");
                };
                if &s.provider_id != bound || &s.task_id != session.task_id() {
                    return reject(SubmitError::BadAuthTag.reason());
                }
                match session.submit(&s) {
                    Ok(()) => Message::Ack(Ack::ok()),
                    Err(e) => reject(e.reason()),
                }
            }
            _ => reject("unexpected_message"),
        }
    }
}

/// Builds the canonical SUBMIT line a provider sends.
pub fn submit_line(task_id: &Id, provider_id: &Id, nonce: &str, predictions: &[crate::formats::PredictionVector], key: &[u8]) -> String {
    encode(&Message::Submit(Submission::signed(task_id, provider_id, nonce, predictions, key)))
}

pub fn hello_line(task_id: &Id, provider_id: &Id) -> String {
    encode(&Message::Hello(Hello {
        task_id: task_id.clone(),
        provider_id: provider_id.clone(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{Format, PredictionVector};
    use crate::id::id;

    #[test]
    fn submit_round_trips_canonically() {
        let p = PredictionVector::new(Format::Measurement, vec![0.1234567891234, 0.8765432108766]).unwrap();
        let line = submit_line(&id("t"), &id("p1"), "abcd", &[p], b"k");
        let Message::Submit(s) = decode(&line).unwrap() else { panic!() };
        assert_eq!(s.predictions[0].values()[0], 0.123456789);
        assert_eq!(encode(&Message::Submit(s)), line);
        let loose = line.replace("0.123456789", "0.1234567890");
        assert_eq!(decode(&loose), Err(WireError::NonCanonical));
    }

    #[test]
    fn kinds() {
        assert_eq!(decode("NOPE {}"), Err(WireError::UnknownKind("NOPE".into())));
        assert_eq!(decode("ACK"), Err(WireError::MissingKind));
        let ack = encode(&Message::Ack(Ack::reject("duplicate")));
        assert_eq!(ack, r#"ACK {"accepted":false,"reason":"duplicate"}"#);
        assert_eq!(decode(&ack).unwrap(), Message::Ack(Ack::reject("duplicate")));
    }
}
