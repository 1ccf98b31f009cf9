//! Minimal paragraph markup used by the article export.
//!
//! Two constructs are recognised:
//! - intra-wiki links `[[Target]]` / `[[Target|label]]`, rendered as their
//!   label and remembered as a span of the plain text;
//! - citation markers `<ref name="id"/>`, removed from the plain text and
//!   remembered with the plain-text offset at which they stood.
//!
//! Everything else is copied verbatim. Unbalanced link brackets or an
//! unterminated `<ref` make the whole paragraph unparseable.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Citation {
    pub ref_id: String,
    /// Byte offset in the plain text.
    pub at: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedParagraph {
    pub plain: String,
    /// Byte spans `[start, end)` of link labels in `plain`.
    pub links: Vec<(usize, usize)>,
    pub citations: Vec<Citation>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MarkupError {
    #[error("unterminated link starting at byte {0}")]
    UnterminatedLink(usize),
    #[error("stray link terminator at byte {0}")]
    StrayLinkClose(usize),
    #[error("empty link target at byte {0}")]
    EmptyLink(usize),
    #[error("unterminated citation at byte {0}")]
    UnterminatedRef(usize),
    #[error("citation without a name at byte {0}")]
    UnnamedRef(usize),
}

fn parse_ref_name(tag: &str) -> Option<String> {
    let idx = tag.find("name")?;
    let rest = tag[idx + 4..].trim_start().strip_prefix('=')?.trim_start();
    let name = match rest.chars().next()? {
        q @ ('"' | '\'') => {
            let inner = &rest[1..];
            &inner[..inner.find(q)?]
        }
        _ => rest
            .split(|c: char| c.is_whitespace() || c == '/' || c == '>')
            .next()?,
    };
    (!name.is_empty()).then(|| name.to_string())
}

pub fn parse_paragraph(raw: &str) -> Result<ParsedParagraph, MarkupError> {
    let mut out = ParsedParagraph::default();
    let mut rest = raw;
    let mut consumed = 0usize;

    loop {
        let next_link = rest.find("[[");
        let next_close = rest.find("]]");
        let next_ref = rest.find("<ref");
        let next = [next_link, next_close, next_ref].into_iter().flatten().min();
        let Some(at) = next else {
            out.plain.push_str(rest);
            break;
        };
        out.plain.push_str(&rest[..at]);
        let here = &rest[at..];
        let abs = consumed + at;

        if Some(at) == next_close {
            return Err(MarkupError::StrayLinkClose(abs));
        }
        if Some(at) == next_link {
            let end = here.find("]]").ok_or(MarkupError::UnterminatedLink(abs))?;
            let inner = &here[2..end];
            if inner.contains("[[") {
                return Err(MarkupError::UnterminatedLink(abs));
            }
            let label = match inner.split_once('|') {
                Some((_, label)) => label,
                None => inner,
            };
            if inner.trim().is_empty() {
                return Err(MarkupError::EmptyLink(abs));
            }
            let start = out.plain.len();
            out.plain.push_str(label);
            out.links.push((start, out.plain.len()));
            rest = &here[end + 2..];
            consumed = abs + end + 2;
            continue;
        }
        // citation marker
        let end = here.find("/>").ok_or(MarkupError::UnterminatedRef(abs))?;
        if here[..end].contains('>') {
            return Err(MarkupError::UnterminatedRef(abs));
        }
        let ref_id = parse_ref_name(&here[4..end]).ok_or(MarkupError::UnnamedRef(abs))?;
        out.citations.push(Citation { ref_id, at: out.plain.len() });
        rest = &here[end + 2..];
        consumed = abs + end + 2;
    }
    Ok(out)
}
