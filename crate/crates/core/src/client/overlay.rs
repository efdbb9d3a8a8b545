//! Namespace changes made by a transaction, layered over the snapshot.

use std::collections::BTreeMap;

use crate::model::{FileId, FileKind};
use crate::path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Entry {
    pub id: FileId,
    pub kind: FileKind,
    pub mode: u32,
    /// Where the file lived in the snapshot; `None` for files created by
    /// this transaction.
    pub origin: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Node {
    Gone,
    Present(Entry),
}

/// Outcome of looking a path up in the overlay alone.
pub(crate) enum Lookup<'a> {
    /// The overlay decides: the path is absent or bound to this entry.
    Decided(Option<&'a Entry>),
    /// Resolve this snapshot path instead.
    Snapshot(String),
}

#[derive(Debug, Default, Clone)]
pub(crate) struct Overlay {
    nodes: BTreeMap<String, Node>,
}

impl Overlay {
    pub fn lookup(&self, p: &str) -> Lookup<'_> {
        let comps = match path::components(p) {
            Ok(c) => c,
            Err(_) => return Lookup::Decided(None),
        };
        // Deepest overlay node on the path wins.
        for depth in (0..=comps.len()).rev() {
            let prefix = path::join(&comps[..depth]);
            let Some(node) = self.nodes.get(&prefix) else {
                continue;
            };
            let rest = &comps[depth..];
            return match node {
                Node::Gone => Lookup::Decided(None),
                Node::Present(e) if rest.is_empty() => Lookup::Decided(Some(e)),
                Node::Present(e) => match (&e.origin, e.kind) {
                    (Some(origin), FileKind::Directory) => {
                        let mut full: Vec<&str> = path::components(origin).unwrap_or_default();
                        full.extend_from_slice(rest);
                        Lookup::Snapshot(path::join(&full))
                    }
                    _ => Lookup::Decided(None),
                },
            };
        }
        Lookup::Snapshot(path::join(&comps))
    }

    pub fn set(&mut self, p: &str, node: Node) {
        self.nodes.insert(p.to_string(), node);
    }

    /// Direct children recorded in the overlay under `dir`.
    pub fn children(&self, dir: &str) -> Vec<(String, &Node)> {
        let prefix = if dir == "/" { "/".to_string() } else { format!("{dir}/") };
        self.nodes
            .range(prefix.clone()..)
            .take_while(|(k, _)| k.starts_with(&prefix))
            .filter_map(|(k, n)| {
                let name = &k[prefix.len()..];
                (!name.is_empty() && !name.contains('/')).then(|| (name.to_string(), n))
            })
            .collect()
    }

    fn take_subtree(&mut self, root: &str) -> Vec<(String, Node)> {
        let keys: Vec<String> = self
            .nodes
            .keys()
            .filter(|k| k.as_str() != root && path::is_within(k, root))
            .cloned()
            .collect();
        keys.into_iter()
            .map(|k| {
                let n = self.nodes.remove(&k).expect("key listed");
                (k, n)
            })
            .collect()
    }

    /// Drops overlay state below `root` (after removing an empty directory).
    pub fn clear_below(&mut self, root: &str) {
        self.take_subtree(root);
    }

    /// Moves `from` (bound to `entry`) and everything recorded beneath it
    /// to `to`.
    pub fn rename(&mut self, from: &str, to: &str, entry: Entry) {
        let moved = self.take_subtree(from);
        self.take_subtree(to);
        self.nodes.insert(from.to_string(), Node::Gone);
        self.nodes.insert(to.to_string(), Node::Present(entry));
        for (k, n) in moved {
            let suffix = &k[from.len()..];
            self.nodes.insert(format!("{to}{suffix}"), n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir(id: u64, origin: Option<&str>) -> Entry {
        Entry {
            id: FileId(id),
            kind: FileKind::Directory,
            mode: 0o755,
            origin: origin.map(str::to_string),
        }
    }

    #[test]
    fn renamed_directories_resolve_through_origin() {
        let mut o = Overlay::default();
        o.rename("/d", "/e", dir(4, Some("/d")));
        assert!(matches!(o.lookup("/d/f"), Lookup::Decided(None)));
        match o.lookup("/e/f/g") {
            Lookup::Snapshot(p) => assert_eq!(p, "/d/f/g"),
            _ => panic!("expected snapshot lookup"),
        }
        assert!(matches!(o.lookup("/e"), Lookup::Decided(Some(e)) if e.id == FileId(4)));
        match o.lookup("/x") {
            Lookup::Snapshot(p) => assert_eq!(p, "/x"),
            _ => panic!(),
        }
    }

    #[test]
    fn local_directories_have_only_local_children() {
        let mut o = Overlay::default();
        o.set("/n", Node::Present(dir(1 << 63, None)));
        assert!(matches!(o.lookup("/n/x"), Lookup::Decided(None)));
        o.set("/n/x", Node::Present(dir((1 << 63) | 1, None)));
        assert!(matches!(o.lookup("/n/x"), Lookup::Decided(Some(_))));
        o.rename("/n", "/m", dir(1 << 63, None));
        assert!(matches!(o.lookup("/m/x"), Lookup::Decided(Some(_))));
        assert!(matches!(o.lookup("/n/x"), Lookup::Decided(None)));
        let kids: Vec<String> = o.children("/m").into_iter().map(|(k, _)| k).collect();
        assert_eq!(kids, ["x"]);
        let root: Vec<String> = o.children("/").into_iter().map(|(k, _)| k).collect();
        assert_eq!(root, ["m", "n"]);
    }
}
