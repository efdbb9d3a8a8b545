//! Absolute path handling. Paths are `/`-separated, start with `/`, and
//! contain no empty, `.` or `..` components. `/` itself is the root.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid path: {0:?}")]
pub struct InvalidPath(pub String);

pub fn components(path: &str) -> Result<Vec<&str>, InvalidPath> {
    let rest = path
        .strip_prefix('/')
        .ok_or_else(|| InvalidPath(path.to_string()))?;
    if rest.is_empty() {
        return Ok(Vec::new());
    }
    let comps: Vec<&str> = rest.split('/').collect();
    if comps
        .iter()
        .any(|c| c.is_empty() || *c == "." || *c == "..")
    {
        return Err(InvalidPath(path.to_string()));
    }
    Ok(comps)
}

/// Canonical form of a component list.
pub fn join(comps: &[&str]) -> String {
    if comps.is_empty() {
        "/".to_string()
    } else {
        let mut s = String::new();
        for c in comps {
            s.push('/');
            s.push_str(c);
        }
        s
    }
}

/// Splits into (parent path, final name). The root has no parent.
pub fn split_parent(path: &str) -> Result<(String, String), InvalidPath> {
    let comps = components(path)?;
    match comps.split_last() {
        Some((name, parent)) => Ok((join(parent), name.to_string())),
        None => Err(InvalidPath(path.to_string())),
    }
}

pub fn child(parent: &str, name: &str) -> String {
    if parent == "/" {
        format!("/{name}")
    } else {
        format!("{parent}/{name}")
    }
}

/// True when `path` is `ancestor` or lies beneath it.
pub fn is_within(path: &str, ancestor: &str) -> bool {
    ancestor == "/"
        || path == ancestor
        || (path.starts_with(ancestor) && path.as_bytes().get(ancestor.len()) == Some(&b'/'))
}
