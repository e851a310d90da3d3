//! Signed, stateless, event-scoped access tokens.
//!
//! Wire form: `base64url(kind:expires_at:scope_event) "." base64url(hmac_sha256)`.
//! The MAC covers the whole claims segment.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenKind {
    UserSession,
    EntryInjection,
}

impl TokenKind {
    fn tag(self) -> &'static str {
        match self {
            TokenKind::UserSession => "u",
            TokenKind::EntryInjection => "e",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "u" => Some(TokenKind::UserSession),
            "e" => Some(TokenKind::EntryInjection),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claims {
    pub scope_event: String,
    pub kind: TokenKind,
    /// Milliseconds since the Unix epoch.
    pub expires_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum TokenError {
    #[error("malformed token")]
    Malformed,
    #[error("bad token signature")]
    BadSignature,
    #[error("token expired")]
    Expired,
}

#[derive(Clone)]
pub struct SigningKey(Vec<u8>);

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SigningKey(..)")
    }
}

impl SigningKey {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        Self(bytes.into())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    fn mac(&self) -> HmacSha256 {
        <HmacSha256 as KeyInit>::new_from_slice(&self.0).expect("hmac accepts any key length")
    }

    /// Deterministic: the same claims and key always produce the same token.
    pub fn mint(&self, claims: &Claims) -> String {
        let body = format!(
            "{}:{}:{}",
            claims.kind.tag(),
            claims.expires_at,
            claims.scope_event
        );
        let encoded = URL_SAFE_NO_PAD.encode(body.as_bytes());
        let mut mac = self.mac();
        mac.update(encoded.as_bytes());
        let sig = URL_SAFE_NO_PAD.encode(mac.finalize().into_bytes());
        format!("{encoded}.{sig}")
    }

    /// Checks signature and expiry against `now_millis`.
    pub fn verify(&self, token: &str, now_millis: u64) -> Result<Claims, TokenError> {
        let (encoded, sig) = token.split_once('.').ok_or(TokenError::Malformed)?;
        let sig = URL_SAFE_NO_PAD
            .decode(sig)
            .map_err(|_| TokenError::Malformed)?;
        let mut mac = self.mac();
        mac.update(encoded.as_bytes());
        mac.verify_slice(&sig)
            .map_err(|_| TokenError::BadSignature)?;

        let body = URL_SAFE_NO_PAD
            .decode(encoded)
            .map_err(|_| TokenError::Malformed)?;
        let body = core::str::from_utf8(&body).map_err(|_| TokenError::Malformed)?;
        let mut parts = body.splitn(3, ':');
        let kind = parts
            .next()
            .and_then(TokenKind::from_tag)
            .ok_or(TokenError::Malformed)?;
        let expires_at = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or(TokenError::Malformed)?;
        let scope_event = parts.next().ok_or(TokenError::Malformed)?;
        if now_millis >= expires_at {
            return Err(TokenError::Expired);
        }
        Ok(Claims {
            scope_event: scope_event.into(),
            kind,
            expires_at,
        })
    }
}
