//! Newline-delimited JSON spoken over the serve socket.

use base64::Engine as _;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "lowercase")]
pub enum ClientMsg {
    Key { code: u8 },
    Cmd { s: String },
    Ctl { s: Ctl },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ctl {
    Pause,
    Resume,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Running,
    Debug,
    Halted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "lowercase")]
pub enum ServerMsg {
    Frame { seq: u64, b64: String },
    Out { s: String },
    State { s: RunState },
    Err { s: String },
}

impl ServerMsg {
    pub fn frame(seq: u64, fb: &[u8]) -> ServerMsg {
        ServerMsg::Frame { seq, b64: base64::engine::general_purpose::STANDARD.encode(fb) }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("messages serialize")
    }
}

pub fn decode_frame(b64: &str) -> Option<Vec<u8>> {
    base64::engine::general_purpose::STANDARD.decode(b64).ok()
}

pub fn parse_client(line: &str) -> Result<ClientMsg, String> {
    serde_json::from_str(line).map_err(|e| format!("bad message: {e}"))
}
