//! Newline-delimited JSON control frames.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::codec::{decode_params, encode_params};
use crate::error::{Error, Result};
use crate::mdfnn::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Frame {
    Hello { client_id: u32, examples: usize },
    RoundBegin { round: u32, params_b64: String },
    Update { round: u32, params_b64: String, examples: usize },
    RoundEnd { round: u32, digest: String },
    Shutdown,
    Error { message: String },
}

impl Frame {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("frames always serialize");
        s.push('\n');
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Protocol(format!("bad frame: {e}")))
    }
}

pub fn params_to_b64(p: &ModelParams) -> String {
    STANDARD.encode(encode_params(p))
}

pub fn params_from_b64(s: &str) -> Result<ModelParams> {
    let bytes = STANDARD.decode(s).map_err(|e| Error::Protocol(format!("params_b64 is not base64: {e}")))?;
    decode_params(&bytes)
}

pub fn digest_hex(d: u64) -> String {
    format!("{d:016x}")
}

const ALLOWED_KEYS: [&str; 7] = ["type", "client_id", "examples", "round", "params_b64", "digest", "message"];

/// Checks that transcript lines carry only parameters, counts and control
/// fields: known keys, scalar values, and nothing but a parameter blob in
/// `params_b64`.
pub fn check_transcript<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<()> {
    for (i, line) in lines.into_iter().enumerate() {
        let v: Value = serde_json::from_str(line.trim_end()).map_err(|e| Error::Protocol(format!("line {i}: {e}")))?;
        let obj = v.as_object().ok_or_else(|| Error::Protocol(format!("line {i}: not an object")))?;
        for (k, val) in obj {
            if !ALLOWED_KEYS.contains(&k.as_str()) {
                return Err(Error::Protocol(format!("line {i}: unexpected key {k:?}")));
            }
            if val.is_array() || val.is_object() {
                return Err(Error::Protocol(format!("line {i}: structured value under {k:?}")));
            }
            if k == "params_b64" {
                params_from_b64(val.as_str().unwrap_or_default())
                    .map_err(|e| Error::Protocol(format!("line {i}: params_b64 is not a parameter blob: {e}")))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_shapes() {
        assert_eq!(Frame::Shutdown.to_line(), "{\"type\":\"shutdown\"}\n");
        let h = Frame::Hello { client_id: 3, examples: 10 };
        assert_eq!(h.to_line(), "{\"type\":\"hello\",\"client_id\":3,\"examples\":10}\n");
        assert_eq!(Frame::parse(&h.to_line()).unwrap(), h);
        assert!(Frame::parse("{\"type\":\"gossip\"}").is_err());
    }

    #[test]
    fn transcript_scan_flags_payloads() {
        assert!(check_transcript(["{\"type\":\"hello\",\"client_id\":1,\"examples\":4}"]).is_ok());
        assert!(check_transcript(["{\"type\":\"hello\",\"features\":[0.1,0.2]}"]).is_err());
        assert!(check_transcript(["{\"type\":\"update\",\"params_b64\":\"AAAA\"}"]).is_err());
    }
}
