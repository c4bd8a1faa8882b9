//! Recursive equal 4-way partition of a query window's messages.
//!
//! A leaf splits once it holds more than `m_s` messages, unless it is at
//! the maximum depth. Internal nodes hold no messages themselves. Children
//! are ordered SW, SE, NW, NE and a node's path is the string of child
//! indices from the root (`""` is the root, `"30"` is child 0 of child 3).

use crate::error::{Error, Result};
use crate::model::{GeoMessage, Region};

/// Child index of `(lat, lon)` within `region`: 0 SW, 1 SE, 2 NW, 3 NE.
///
/// Points on a midline go to the higher-coordinate side.
pub fn point_quadrant(region: &Region, lat: f64, lon: f64) -> Result<usize> {
    if !region.contains(lat, lon) {
        return Err(Error::OutOfRegion { lat, lon });
    }
    Ok(quadrant_unchecked(region, lat, lon))
}

fn quadrant_unchecked(region: &Region, lat: f64, lon: f64) -> usize {
    let north = lat >= region.mid_lat();
    let east = lon >= region.mid_lon();
    usize::from(north) * 2 + usize::from(east)
}

#[derive(Debug, Clone)]
pub struct QuadNode {
    pub region: Region,
    pub depth: u32,
    pub path: String,
    items: Vec<usize>,
    children: Option<Box<[QuadNode; 4]>>,
}

impl QuadNode {
    fn leaf(region: Region, depth: u32, path: String) -> Self {
        QuadNode { region, depth, path, items: Vec::new(), children: None }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    pub fn children(&self) -> Option<&[QuadNode; 4]> {
        self.children.as_deref()
    }

    /// Indices (into [`QuadTree::messages`]) held by this node; empty for internal nodes.
    pub fn items(&self) -> &[usize] {
        &self.items
    }

    fn split(&mut self, messages: &[GeoMessage], m_s: usize, max_depth: u32) {
        let mut children: [QuadNode; 4] = std::array::from_fn(|i| {
            QuadNode::leaf(self.region.quadrant(i), self.depth + 1, format!("{}{}", self.path, i))
        });
        for idx in std::mem::take(&mut self.items) {
            let m = &messages[idx];
            children[quadrant_unchecked(&self.region, m.lat, m.lon)].items.push(idx);
        }
        for child in children.iter_mut() {
            if child.items.len() > m_s && child.depth < max_depth {
                child.split(messages, m_s, max_depth);
            }
        }
        self.children = Some(Box::new(children));
    }

    fn collect_into(&self, out: &mut Vec<usize>) {
        match &self.children {
            None => out.extend_from_slice(&self.items),
            Some(ch) => ch.iter().for_each(|c| c.collect_into(out)),
        }
    }

    fn preorder<'a>(&'a self, out: &mut Vec<&'a QuadNode>) {
        out.push(self);
        if let Some(ch) = &self.children {
            ch.iter().for_each(|c| c.preorder(out));
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuadTree {
    root: QuadNode,
    m_s: usize,
    max_depth: u32,
    messages: Vec<GeoMessage>,
}

impl QuadTree {
    pub fn new(region: Region, m_s: usize, max_depth: u32) -> Self {
        QuadTree { root: QuadNode::leaf(region, 0, String::new()), m_s, max_depth, messages: Vec::new() }
    }

    /// Builds a tree by inserting `messages` in order.
    pub fn build(region: Region, m_s: usize, max_depth: u32, messages: impl IntoIterator<Item = GeoMessage>) -> Result<Self> {
        let mut tree = QuadTree::new(region, m_s, max_depth);
        for m in messages {
            tree.insert(m)?;
        }
        Ok(tree)
    }

    pub fn insert(&mut self, message: GeoMessage) -> Result<()> {
        let (lat, lon) = (message.lat, message.lon);
        if !self.root.region.contains(lat, lon) {
            return Err(Error::OutOfRegion { lat, lon });
        }
        let idx = self.messages.len();
        self.messages.push(message);
        let mut node = &mut self.root;
        while node.children.is_some() {
            let q = quadrant_unchecked(&node.region, lat, lon);
            node = &mut node.children.as_mut().expect("internal node")[q];
        }
        node.items.push(idx);
        if node.items.len() > self.m_s && node.depth < self.max_depth {
            node.split(&self.messages, self.m_s, self.max_depth);
        }
        Ok(())
    }

    pub fn root(&self) -> &QuadNode {
        &self.root
    }

    pub fn m_s(&self) -> usize {
        self.m_s
    }

    pub fn max_depth(&self) -> u32 {
        self.max_depth
    }

    pub fn messages(&self) -> &[GeoMessage] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// Messages in `node`'s subtree, sorted by (ts, id).
    pub fn collect_subtree(&self, node: &QuadNode) -> Vec<&GeoMessage> {
        let mut idx = Vec::new();
        node.collect_into(&mut idx);
        let mut out: Vec<&GeoMessage> = idx.into_iter().map(|i| &self.messages[i]).collect();
        out.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
        out
    }

    /// All nodes in pre-order; children visited SW, SE, NW, NE, which is
    /// also lexicographic order of node paths.
    pub fn nodes(&self) -> Vec<&QuadNode> {
        let mut out = Vec::new();
        self.root.preorder(&mut out);
        out
    }

    pub fn find(&self, path: &str) -> Option<&QuadNode> {
        let mut node = &self.root;
        for c in path.chars() {
            let i = c.to_digit(10).filter(|&d| d < 4)? as usize;
            node = &node.children()?[i];
        }
        Some(node)
    }
}
