//! Single-pass `{name}` placeholder substitution.
//!
//! Substituted values are never rescanned, so a question that happens to
//! contain `{context}` is inserted verbatim. Braces that do not form a known
//! placeholder (the JSON example in the Q&A prompt) are copied through.

/// Replaces each `{key}` occurrence for the given keys in one left-to-right
/// pass.
pub fn substitute(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    'outer: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        for (key, value) in values {
            let len = key.len() + 2;
            if tail.len() >= len
                && tail.as_bytes()[len - 1] == b'}'
                && &tail[1..len - 1] == *key
            {
                out.push_str(value);
                rest = &tail[len..];
                continue 'outer;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}
