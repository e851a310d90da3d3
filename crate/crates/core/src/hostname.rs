//! Event-specific hostnames: `<slug>[-<n>]-<shortid>.<base_domain>`.

use alloc::format;
use alloc::string::String;

/// Number of trailing event-id characters used in hostnames.
pub const SHORTID_LEN: usize = 6;

/// Last six characters of an event id, lowercased for DNS.
pub fn shortid(event_id: &str) -> String {
    let start = event_id.len().saturating_sub(SHORTID_LEN);
    event_id[start..].to_ascii_lowercase()
}

/// First free hostname for `slug` in `event_id`.
///
/// The plain name is tried first; on collision `-2`, `-3`, ... is inserted
/// between the slug and the short id.
pub fn allocate_hostname<F>(slug: &str, event_id: &str, base_domain: &str, is_live: F) -> String
where
    F: Fn(&str) -> bool,
{
    let short = shortid(event_id);
    let plain = format!("{slug}-{short}.{base_domain}");
    if !is_live(&plain) {
        return plain;
    }
    (2u64..)
        .map(|n| format!("{slug}-{n}-{short}.{base_domain}"))
        .find(|candidate| !is_live(candidate))
        .expect("finitely many live names")
}

/// Checks `hostname` against the grammar for a known slug, returning the
/// collision counter (1 when absent) and short id.
pub fn parse_hostname<'a>(
    hostname: &'a str,
    slug: &str,
    base_domain: &str,
) -> Option<(u64, &'a str)> {
    let label = hostname.strip_suffix(base_domain)?.strip_suffix('.')?;
    let rest = label.strip_prefix(slug)?.strip_prefix('-')?;
    let valid_short = |s: &str| {
        s.len() == SHORTID_LEN
            && s.bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit())
    };
    if valid_short(rest) {
        return Some((1, rest));
    }
    let (n, short) = rest.split_once('-')?;
    let n: u64 = n.parse().ok().filter(|n| *n >= 2)?;
    valid_short(short).then_some((n, short))
}
