//! Presigned URLs and per-task tokens.
//!
//! A presigned URL authorizes one method on one blob path until an expiry.
//! Its signature is lowercase hex HMAC-SHA256, keyed with the gateway
//! secret, over the canonical string
//!
//! ```text
//! {METHOD}\n{path}\n{expiresAt}
//! ```
//!
//! where `path` is `objects/{objectId}/{stateKey}/{versionId}` (no leading
//! slash) and `expiresAt` is decimal unix seconds. The URL is valid through
//! `expiresAt` inclusive.
//!
//! Task tokens use the same key over `task\n{invocationId}\n{objectId}\n{expiresAt}`
//! and travel as `{expiresAt}.{hexsig}`.

use std::fmt;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Put,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Put => "PUT",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum Denied {
    #[error("url expired")]
    Expired,
    #[error("path does not match the signed path")]
    PathMismatch,
    #[error("method does not match the signed method")]
    MethodMismatch,
    #[error("bad signature")]
    BadSignature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PresignedUrl {
    pub method: Method,
    pub path: String,
    pub expires_at: u64,
    pub signature: String,
}

impl PresignedUrl {
    /// Path plus query, relative to the gateway base URL:
    /// `/blob/{path}?expires={expiresAt}&sig={signature}`.
    pub fn relative(&self) -> String {
        format!(
            "/blob/{}?expires={}&sig={}",
            self.path, self.expires_at, self.signature
        )
    }

    pub fn absolute(&self, base_url: &str) -> String {
        format!("{}{}", base_url.trim_end_matches('/'), self.relative())
    }

    /// Parses a URL produced by [`PresignedUrl::absolute`] or
    /// [`PresignedUrl::relative`]. The method is not part of the URL.
    pub fn parse(method: Method, url: &str) -> Option<Self> {
        let start = url.find("/blob/")?;
        let rest = &url[start + "/blob/".len()..];
        let (path, query) = rest.split_once('?')?;
        let mut expires = None;
        let mut sig = None;
        for kv in query.split('&') {
            match kv.split_once('=') {
                Some(("expires", v)) => expires = v.parse().ok(),
                Some(("sig", v)) => sig = Some(v.to_string()),
                _ => {}
            }
        }
        Some(Self {
            method,
            path: path.to_string(),
            expires_at: expires?,
            signature: sig?,
        })
    }
}

pub fn canonical_string(method: Method, path: &str, expires_at: u64) -> String {
    format!("{}\n{}\n{}", method.as_str(), path, expires_at)
}

#[derive(Clone)]
pub struct Signer {
    key: Vec<u8>,
}

impl fmt::Debug for Signer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Signer(..)")
    }
}

impl Signer {
    pub fn new(key: impl Into<Vec<u8>>) -> Self {
        Self { key: key.into() }
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.key).expect("hmac accepts any key length")
    }

    pub fn sign(&self, message: &str) -> String {
        let mut mac = self.mac();
        mac.update(message.as_bytes());
        hex::encode(mac.finalize().into_bytes())
    }

    fn check(&self, message: &str, signature_hex: &str) -> bool {
        // only the canonical lowercase encoding is accepted
        if signature_hex.len() != 64
            || !signature_hex
                .bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
        {
            return false;
        }
        let Ok(sig) = hex::decode(signature_hex) else {
            return false;
        };
        let mut mac = self.mac();
        mac.update(message.as_bytes());
        mac.verify_slice(&sig).is_ok()
    }

    pub fn presign(&self, method: Method, path: &str, expires_at: u64) -> PresignedUrl {
        PresignedUrl {
            method,
            path: path.to_string(),
            expires_at,
            signature: self.sign(&canonical_string(method, path, expires_at)),
        }
    }

    /// Checks that `url` grants `method` on `path` at time `now`.
    pub fn verify(&self, url: &PresignedUrl, method: Method, path: &str, now: u64) -> Result<(), Denied> {
        if url.path != path {
            return Err(Denied::PathMismatch);
        }
        if url.method != method {
            return Err(Denied::MethodMismatch);
        }
        if !self.check(&canonical_string(url.method, &url.path, url.expires_at), &url.signature) {
            return Err(Denied::BadSignature);
        }
        if now > url.expires_at {
            return Err(Denied::Expired);
        }
        Ok(())
    }

    pub fn task_token(&self, invocation_id: &str, object_id: &str, expires_at: u64) -> String {
        let sig = self.sign(&task_message(invocation_id, object_id, expires_at));
        format!("{expires_at}.{sig}")
    }

    pub fn verify_task_token(
        &self,
        token: &str,
        invocation_id: &str,
        object_id: &str,
        now: u64,
    ) -> Result<(), Denied> {
        let Some((exp, sig)) = token.split_once('.') else {
            return Err(Denied::BadSignature);
        };
        let Ok(expires_at) = exp.parse::<u64>() else {
            return Err(Denied::BadSignature);
        };
        if !self.check(&task_message(invocation_id, object_id, expires_at), sig) {
            return Err(Denied::BadSignature);
        }
        if now > expires_at {
            return Err(Denied::Expired);
        }
        Ok(())
    }
}

fn task_message(invocation_id: &str, object_id: &str, expires_at: u64) -> String {
    format!("task\n{invocation_id}\n{object_id}\n{expires_at}")
}
