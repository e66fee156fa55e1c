use std::collections::BTreeMap;

use super::vocab::VocabularyLayout;
use crate::error::{Error, Result};
use crate::tokenizer::IdentifierTable;

#[derive(Clone, Debug, Default)]
struct Node {
    children: BTreeMap<u32, usize>,
    item: Option<u32>,
}

/// Prefix tree over full item token paths (codes then dedup token).
#[derive(Clone, Debug)]
pub struct PrefixTrie {
    nodes: Vec<Node>,
    depth: usize,
    items: usize,
}

impl PrefixTrie {
    pub fn build(layout: &VocabularyLayout, identifiers: &IdentifierTable) -> Result<Self> {
        layout.check_capacity(identifiers)?;
        let mut nodes = vec![Node::default()];
        for (item, id) in identifiers.items().iter().enumerate() {
            let mut cur = 0;
            for tok in layout.item_tokens(id)? {
                cur = match nodes[cur].children.get(&tok) {
                    Some(&next) => next,
                    None => {
                        nodes.push(Node::default());
                        let next = nodes.len() - 1;
                        nodes[cur].children.insert(tok, next);
                        next
                    }
                };
            }
            if let Some(first) = nodes[cur].item {
                return Err(Error::Uniqueness {
                    first,
                    second: item as u32,
                });
            }
            nodes[cur].item = Some(item as u32);
        }
        Ok(Self {
            nodes,
            depth: layout.tokens_per_item(),
            items: identifiers.len(),
        })
    }

    /// Number of tokens in a complete path.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_items(&self) -> usize {
        self.items
    }

    fn walk(&self, prefix: &[u32]) -> Option<usize> {
        let mut cur = 0;
        for tok in prefix {
            cur = *self.nodes[cur].children.get(tok)?;
        }
        Some(cur)
    }

    /// Valid next tokens after `prefix`, ascending. Empty for unknown or
    /// complete prefixes.
    pub fn children(&self, prefix: &[u32]) -> Vec<u32> {
        self.walk(prefix)
            .map(|n| self.nodes[n].children.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn item_at(&self, path: &[u32]) -> Option<u32> {
        self.walk(path).and_then(|n| self.nodes[n].item)
    }

    /// Every complete path with its item, in token order.
    pub fn paths(&self) -> Vec<(Vec<u32>, u32)> {
        let mut out = Vec::with_capacity(self.items);
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if let Some(item) = self.nodes[node].item {
                out.push((path.clone(), item));
            }
            for (&tok, &child) in self.nodes[node].children.iter().rev() {
                let mut p = path.clone();
                p.push(tok);
                stack.push((child, p));
            }
        }
        out
    }
}
