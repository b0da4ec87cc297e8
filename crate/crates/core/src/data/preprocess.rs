use std::sync::LazyLock;

use regex::Regex;

/// Replacement tokens, in the order they receive reserved token ids.
pub const SPECIAL_TOKENS: [&str; 6] = [
    "[QUOTE]",
    "[PGP PUBKEY]",
    "[PGP SIGNATURE]",
    "[PGP ENCMSG]",
    "[LINK]",
    "[IMAGE]",
];

struct Rule {
    pattern: Regex,
    token: &'static str,
}

static RULES: LazyLock<Vec<Rule>> = LazyLock::new(|| {
    let rule = |p: &str, token| Rule {
        pattern: Regex::new(p).expect("valid pattern"),
        token,
    };
    vec![
        rule(
            r"(?s)-----BEGIN PGP PUBLIC KEY BLOCK-----.*?-----END PGP PUBLIC KEY BLOCK-----",
            "[PGP PUBKEY]",
        ),
        rule(r"(?s)-----BEGIN PGP SIGNATURE-----.*?-----END PGP SIGNATURE-----", "[PGP SIGNATURE]"),
        rule(r"(?s)-----BEGIN PGP MESSAGE-----.*?-----END PGP MESSAGE-----", "[PGP ENCMSG]"),
        // bare hashes / digests
        rule(r"\b[0-9A-Fa-f]{32,}\b", "[PGP ENCMSG]"),
        rule(r"(?is)\[img\].*?\[/img\]", "[IMAGE]"),
        rule(r"(?i)(?:https?://|www\.)\S+?\.(?:png|jpe?g|gif|bmp)\b", "[IMAGE]"),
        rule(r"(?i)(?:https?://|www\.)\S+", "[LINK]"),
        rule(r"(?i)\b[\w-]+(?:\.[\w-]+)*\.onion\S*", "[LINK]"),
    ]
});

/// Replaces balanced, lowercase `[quote…]…[/quote]` spans (outermost first)
/// with `[QUOTE]`. Unbalanced tags are left alone.
fn replace_quotes(text: &str) -> String {
    const OPEN: &str = "[quote";
    const CLOSE: &str = "[/quote]";
    let mut out = String::with_capacity(text.len());
    let mut depth = 0usize;
    let mut span_start = 0usize;
    let mut copied_to = 0usize;
    let mut i = 0usize;
    let bytes = text.as_bytes();
    while i < bytes.len() {
        let rest = &text[i..];
        if rest.starts_with(OPEN) {
            let after = &rest[OPEN.len()..];
            let tag_end = match after.chars().next() {
                Some(']') => Some(OPEN.len() + 1),
                Some('=') => after.find(']').map(|p| OPEN.len() + p + 1),
                _ => None,
            };
            if let Some(len) = tag_end {
                if depth == 0 {
                    span_start = i;
                }
                depth += 1;
                i += len;
                continue;
            }
        } else if rest.starts_with(CLOSE) && depth > 0 {
            depth -= 1;
            i += CLOSE.len();
            if depth == 0 {
                out.push_str(&text[copied_to..span_start]);
                out.push_str("[QUOTE]");
                copied_to = i;
            }
            continue;
        }
        i += rest.chars().next().map_or(1, char::len_utf8);
    }
    out.push_str(&text[copied_to..]);
    out
}

fn single_pass(text: &str) -> String {
    let mut s = replace_quotes(text);
    for rule in RULES.iter() {
        if rule.pattern.is_match(&s) {
            s = rule.pattern.replace_all(&s, rule.token).into_owned();
        }
    }
    s
}

/// Substitutes quotes, PGP material, hashes, images and links with the
/// special tokens. The result is a fixed point: preprocessing it again
/// changes nothing.
pub fn preprocess_post(text: &str) -> String {
    let mut current = single_pass(text);
    // A replacement can expose a new match (e.g. a quote closed after a
    // link was collapsed); iterate to the fixed point.
    for _ in 0..8 {
        let next = single_pass(&current);
        if next == current {
            return current;
        }
        current = next;
    }
    current
}
