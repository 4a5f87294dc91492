use serde::Serialize;
use thiserror::Error;

use super::{LABEL_BYTES, MAX_FRIENDS_CAP, MSG_LEN};
use crate::protocol::wire::NOTF_BODY_LEN;

#[derive(Debug, Error, PartialEq)]
pub enum ParamsError {
    #[error("{field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ParamsError {
    ParamsError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// Deployment parameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Params {
    pub max_friends: usize,
    pub notf_packet_len: usize,
    pub label_bits: usize,
    pub token_bits: usize,
    pub msg_len: usize,
    /// Batches per consolidated OBin.
    pub k: usize,
    /// Maximum number of stored batches.
    pub n_batches: usize,
    /// OBin groups per OMT.
    pub m: usize,
    pub lambda: u32,
    pub epsilon_oht: f64,
    pub z: usize,
    pub round_ms: u64,
}

impl Default for Params {
    fn default() -> Self {
        let k = 4;
        let n_batches = 8640;
        Params {
            max_friends: 512,
            notf_packet_len: 256,
            label_bits: 256,
            token_bits: 64,
            msg_len: 256,
            k,
            n_batches,
            m: Params::sqrt_m(n_batches, k),
            lambda: 128,
            epsilon_oht: 0.75,
            z: 17,
            round_ms: 1000,
        }
    }
}

impl Params {
    /// `⌊√(N/k)⌋`, at least 1.
    pub fn sqrt_m(n_batches: usize, k: usize) -> usize {
        let q = n_batches / k.max(1);
        let mut r = (q as f64).sqrt() as usize;
        while r * r > q {
            r -= 1;
        }
        while (r + 1) * (r + 1) <= q {
            r += 1;
        }
        r.max(1)
    }

    pub fn validate(&self) -> Result<(), ParamsError> {
        if self.max_friends == 0 || self.max_friends % 8 != 0 || self.max_friends > MAX_FRIENDS_CAP {
            return Err(invalid(
                "max_friends",
                format!("must be a positive multiple of 8 up to {MAX_FRIENDS_CAP}"),
            ));
        }
        if self.notf_packet_len != NOTF_BODY_LEN {
            return Err(invalid(
                "notf_packet_len",
                format!("wire layout is fixed at {NOTF_BODY_LEN} bytes"),
            ));
        }
        if self.label_bits != LABEL_BYTES * 8 {
            return Err(invalid("label_bits", "wire layout is fixed at 256 bits"));
        }
        if self.token_bits != 64 {
            return Err(invalid("token_bits", "wire layout is fixed at 64 bits"));
        }
        if self.msg_len == 0 || self.msg_len > MSG_LEN {
            return Err(invalid("msg_len", format!("must be in 1..={MSG_LEN}")));
        }
        if self.k == 0 {
            return Err(invalid("k", "must be positive"));
        }
        if self.m == 0 {
            return Err(invalid("m", "must be positive"));
        }
        if self.m * self.k > self.n_batches {
            return Err(invalid(
                "m",
                format!("m*k = {} exceeds N = {}", self.m * self.k, self.n_batches),
            ));
        }
        if !(self.epsilon_oht > 0.0 && self.epsilon_oht <= 1.0) {
            return Err(invalid("epsilon_oht", "must be in (0, 1]"));
        }
        if self.z == 0 {
            return Err(invalid("z", "must be positive"));
        }
        if self.lambda == 0 {
            return Err(invalid("lambda", "must be positive"));
        }
        if self.round_ms == 0 {
            return Err(invalid("round_ms", "must be positive"));
        }
        Ok(())
    }

    /// Sets one field from its config-file name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ParamsError> {
        fn num<T: std::str::FromStr>(field: &'static str, v: &str) -> Result<T, ParamsError> {
            v.trim()
                .parse()
                .map_err(|_| invalid(field, format!("cannot parse {v:?}")))
        }
        match key {
            "max_friends" => self.max_friends = num("max_friends", value)?,
            "notf_packet_len" => self.notf_packet_len = num("notf_packet_len", value)?,
            "label_bits" => self.label_bits = num("label_bits", value)?,
            "token_bits" => self.token_bits = num("token_bits", value)?,
            "msg_len" => self.msg_len = num("msg_len", value)?,
            "k" => self.k = num("k", value)?,
            "n_batches" | "n" => self.n_batches = num("n_batches", value)?,
            "m" => self.m = num("m", value)?,
            "lambda" => self.lambda = num("lambda", value)?,
            "epsilon_oht" => self.epsilon_oht = num("epsilon_oht", value)?,
            "z" => self.z = num("z", value)?,
            "round_ms" => self.round_ms = num("round_ms", value)?,
            _ => return Err(invalid("params", format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 12] = [
        "max_friends",
        "notf_packet_len",
        "label_bits",
        "token_bits",
        "msg_len",
        "k",
        "n_batches",
        "m",
        "lambda",
        "epsilon_oht",
        "z",
        "round_ms",
    ];
}
