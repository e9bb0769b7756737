//! Maximally stable extremal regions.
//!
//! The component tree of the lower level sets `{p : I(p) <= t}` is built by
//! flooding pixels in increasing intensity order through a union-find forest
//! (4-connectivity). Each tree node is a distinct pixel set; it persists from
//! its own level up to one below its parent's level.
//!
//! For a region `R_t` the variation is
//! `(|R_{t+delta}| - |R_{t-delta}|) / |R_t|`, where `R_{t+delta}` is the
//! component containing `R_t` at `t + delta` (clamped to 255) and
//! `R_{t-delta}` is the largest component at `t - delta` inside `R_t` (ties to
//! the lower raster index of the component's first pixel; empty when
//! `t - delta < 0`). A region is kept when its variation is a local minimum
//! along the path (`<=` both neighbours, the lower neighbour following the
//! same largest-component rule) and at most `max_variation`. Each pixel set is
//! reported once, at its most stable level; near-identical nested sets
//! (area ratio above 0.95) are then suppressed greedily, most stable first.
//!
//! Bright regions run the same machinery on the inverted image.

use std::cmp::Ordering;
use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{iou, GrayImage, Pyramid, Rect};

const NONE: u32 = u32::MAX;

/// Nested regions whose area ratio exceeds this are duplicates.
pub const NESTED_DUPLICATE_RATIO: f64 = 0.95;
/// Cross-scale regions with a base-coordinate IoU above this are merged.
pub const CROSS_SCALE_IOU: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    /// Darker than its surroundings: `{I <= level}`.
    DarkOnBright,
    /// Brighter than its surroundings: `{I >= level}`.
    BrightOnDark,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MserConfig {
    pub delta: u8,
    pub min_area: usize,
    /// Fraction of the image area.
    pub max_area: f64,
    pub max_variation: f64,
    pub both_polarities: bool,
}

impl Default for MserConfig {
    fn default() -> Self {
        Self {
            delta: 5,
            min_area: 30,
            max_area: 0.25,
            max_variation: 0.5,
            both_polarities: true,
        }
    }
}

impl MserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta == 0 {
            return Err(Error::Parameter("mser delta must be >= 1".into()));
        }
        if self.min_area == 0 {
            return Err(Error::Parameter("mser min_area must be > 0".into()));
        }
        if !(self.max_area > 0.0 && self.max_area <= 1.0) {
            return Err(Error::Parameter(format!(
                "mser max_area must be a fraction in (0, 1], got {}",
                self.max_area
            )));
        }
        if self.max_variation.is_nan() || self.max_variation < 0.0 {
            return Err(Error::Parameter("mser max_variation must be >= 0".into()));
        }
        Ok(())
    }

    /// Largest admissible region area in pixels for an image of `pixels` pixels.
    pub fn max_area_pixels(&self, pixels: usize) -> usize {
        (self.max_area * pixels as f64).floor() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremalRegion {
    /// Pyramid level of origin (0 = base).
    #[serde(rename = "scale")]
    pub scale_index: u8,
    /// Threshold in original intensities: the region is `{I <= level}` for
    /// dark regions and `{I >= level}` for bright ones.
    pub level: u8,
    pub area: u32,
    pub bbox: Rect,
    pub base_bbox: Rect,
    pub variation: f64,
    pub polarity: Polarity,
    /// First pixel of the region in raster order, in level coordinates.
    pub seed: (u32, u32),
}

impl ExtremalRegion {
    fn contains_value(&self, v: u8) -> bool {
        match self.polarity {
            Polarity::DarkOnBright => v <= self.level,
            Polarity::BrightOnDark => v >= self.level,
        }
    }
}

/// Pixel indices of `region` in `img` (the pyramid level it was found on),
/// recovered by 4-connected flooding from its seed. Sorted ascending.
pub fn region_pixels(img: &GrayImage, region: &ExtremalRegion) -> Vec<usize> {
    let (w, h) = (img.width(), img.height());
    let seed = region.seed.1 as usize * w + region.seed.0 as usize;
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::from([seed]);
    seen[seed] = true;
    while let Some(p) = queue.pop_front() {
        out.push(p);
        let (x, y) = (p % w, p / w);
        let mut visit = |q: usize| {
            if !seen[q] && region.contains_value(img.data()[q]) {
                seen[q] = true;
                queue.push_back(q);
            }
        };
        if x > 0 {
            visit(p - 1);
        }
        if x + 1 < w {
            visit(p + 1);
        }
        if y > 0 {
            visit(p - w);
        }
        if y + 1 < h {
            visit(p + w);
        }
    }
    out.sort_unstable();
    out
}

#[derive(Clone, Copy, Debug)]
struct Node {
    level: u8,
    area: u32,
    parent: u32,
    /// Smallest raster index among the node's pixels.
    first: u32,
    bbox: [u32; 4], // x0, y0, x1, y1 inclusive
}

/// Min-tree of lower level sets.
struct ComponentTree {
    nodes: Vec<Node>,
}

struct Forest {
    parent: Vec<u32>,
    area: Vec<u32>,
    first: Vec<u32>,
    bbox: Vec<[u32; 4]>,
    node: Vec<u32>,
}

impl Forest {
    fn find(&mut self, mut p: u32) -> u32 {
        let mut root = p;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        while self.parent[p as usize] != root {
            let next = self.parent[p as usize];
            self.parent[p as usize] = root;
            p = next;
        }
        root
    }

    /// Unions two roots, returning the surviving one.
    fn union_roots(&mut self, a: u32, b: u32) -> u32 {
        let (big, small) = if self.area[a as usize] >= self.area[b as usize] {
            (a, b)
        } else {
            (b, a)
        };
        let (bi, si) = (big as usize, small as usize);
        self.parent[si] = big;
        self.area[bi] += self.area[si];
        self.first[bi] = self.first[bi].min(self.first[si]);
        let sb = self.bbox[si];
        let bb = &mut self.bbox[bi];
        bb[0] = bb[0].min(sb[0]);
        bb[1] = bb[1].min(sb[1]);
        bb[2] = bb[2].max(sb[2]);
        bb[3] = bb[3].max(sb[3]);
        big
    }
}

impl ComponentTree {
    fn build(img: &GrayImage) -> Self {
        let (w, h) = (img.width(), img.height());
        let n = w * h;
        let data = img.data();

        // counting sort by intensity, raster order within a level
        let mut hist = [0usize; 257];
        for &v in data {
            hist[v as usize + 1] += 1;
        }
        for i in 1..257 {
            hist[i] += hist[i - 1];
        }
        let starts = hist;
        let mut order = vec![0u32; n];
        let mut fill = hist;
        for (i, &v) in data.iter().enumerate() {
            order[fill[v as usize]] = i as u32;
            fill[v as usize] += 1;
        }

        let mut forest = Forest {
            parent: (0..n as u32).collect(),
            area: vec![1; n],
            first: (0..n as u32).collect(),
            bbox: (0..n)
                .map(|i| {
                    let (x, y) = ((i % w) as u32, (i / w) as u32);
                    [x, y, x, y]
                })
                .collect(),
            node: vec![NONE; n],
        };
        let mut processed = vec![false; n];
        let mut nodes: Vec<Node> = Vec::new();
        let mut orphans: Vec<u32> = Vec::new();

        for level in 0..256usize {
            let px = &order[starts[level]..starts[level + 1]];
            if px.is_empty() {
                continue;
            }
            orphans.clear();
            for &p in px {
                processed[p as usize] = true;
                let (x, y) = (p as usize % w, p as usize / w);
                let mut neighbours = [NONE; 4];
                if x > 0 {
                    neighbours[0] = p - 1;
                }
                if x + 1 < w {
                    neighbours[1] = p + 1;
                }
                if y > 0 {
                    neighbours[2] = p - w as u32;
                }
                if y + 1 < h {
                    neighbours[3] = p + w as u32;
                }
                for q in neighbours {
                    if q == NONE || !processed[q as usize] {
                        continue;
                    }
                    let rp = forest.find(p);
                    let rq = forest.find(q);
                    if rp == rq {
                        continue;
                    }
                    for r in [rp, rq] {
                        let nd = forest.node[r as usize];
                        if nd != NONE {
                            orphans.push(nd);
                            forest.node[r as usize] = NONE;
                        }
                    }
                    forest.union_roots(rp, rq);
                }
            }
            for &p in px {
                let r = forest.find(p) as usize;
                let nd = forest.node[r];
                if nd != NONE && nodes[nd as usize].level as usize == level {
                    continue;
                }
                if nd != NONE {
                    // the set existed below this level and only gained pixels
                    orphans.push(nd);
                }
                forest.node[r] = nodes.len() as u32;
                nodes.push(Node {
                    level: level as u8,
                    area: forest.area[r],
                    parent: NONE,
                    first: forest.first[r],
                    bbox: forest.bbox[r],
                });
            }
            for &child in &orphans {
                let r = forest.find(nodes[child as usize].first) as usize;
                nodes[child as usize].parent = forest.node[r];
            }
        }
        Self { nodes }
    }
}

/// Exact rational variation `num / den`.
#[derive(Clone, Copy, Debug)]
struct Variation {
    num: u64,
    den: u64,
}

impl Variation {
    fn cmp(&self, other: &Variation) -> Ordering {
        (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
    }

    fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

struct Stability<'a> {
    nodes: &'a [Node],
    delta: usize,
    /// `below[n * delta + k - 1]`: largest component at `level(n) - k` inside n.
    below: Vec<u32>,
}

impl<'a> Stability<'a> {
    fn new(nodes: &'a [Node], delta: usize) -> Self {
        let n = nodes.len();
        let mut child_start = vec![0u32; n + 1];
        for nd in nodes {
            if nd.parent != NONE {
                child_start[nd.parent as usize + 1] += 1;
            }
        }
        for i in 0..n {
            child_start[i + 1] += child_start[i];
        }
        let mut cursor = child_start.clone();
        let mut children = vec![0u32; child_start[n] as usize];
        for (i, nd) in nodes.iter().enumerate() {
            if nd.parent != NONE {
                let c = &mut cursor[nd.parent as usize];
                children[*c as usize] = i as u32;
                *c += 1;
            }
        }

        let larger = |a: u32, b: u32| -> bool {
            if b == NONE {
                return true;
            }
            let (na, nb) = (&nodes[a as usize], &nodes[b as usize]);
            na.area > nb.area || (na.area == nb.area && na.first < nb.first)
        };

        // children always have smaller ids than their parents
        let mut below = vec![NONE; n * delta];
        for id in 0..n {
            let level = nodes[id].level as i32;
            for k in 1..=delta {
                let s = level - k as i32;
                if s < 0 {
                    break;
                }
                let mut best = NONE;
                for &c in &children[child_start[id] as usize..child_start[id + 1] as usize] {
                    let cl = nodes[c as usize].level as i32;
                    let cand = if cl <= s {
                        c
                    } else {
                        below[c as usize * delta + (cl - s) as usize - 1]
                    };
                    if cand != NONE && larger(cand, best) {
                        best = cand;
                    }
                }
                below[id * delta + k - 1] = best;
            }
        }
        Self {
            nodes,
            delta,
            below,
        }
    }

    fn last_level(&self, id: u32) -> usize {
        let p = self.nodes[id as usize].parent;
        if p == NONE {
            255
        } else {
            self.nodes[p as usize].level as usize - 1
        }
    }

    fn largest_below(&self, id: u32, level: i32) -> u32 {
        let own = self.nodes[id as usize].level as i32;
        if level >= own {
            return id;
        }
        if level < 0 {
            return NONE;
        }
        self.below[id as usize * self.delta + (own - level) as usize - 1]
    }

    fn variation(&self, id: u32, t: usize) -> Variation {
        let top = (t + self.delta).min(255);
        let mut up = id;
        loop {
            let p = self.nodes[up as usize].parent;
            if p == NONE || self.nodes[p as usize].level as usize > top {
                break;
            }
            up = p;
        }
        let down = self.largest_below(id, t as i32 - self.delta as i32);
        let down_area = if down == NONE {
            0
        } else {
            self.nodes[down as usize].area as u64
        };
        Variation {
            num: self.nodes[up as usize].area as u64 - down_area,
            den: self.nodes[id as usize].area as u64,
        }
    }

    fn is_local_min(&self, id: u32, t: usize, v: &Variation) -> bool {
        if t > 0 {
            let prev = self.largest_below(id, t as i32 - 1);
            if prev != NONE && v.cmp(&self.variation(prev, t - 1)) == Ordering::Greater {
                return false;
            }
        }
        if t < 255 {
            let next = if t < self.last_level(id) {
                id
            } else {
                self.nodes[id as usize].parent
            };
            if v.cmp(&self.variation(next, t + 1)) == Ordering::Greater {
                return false;
            }
        }
        true
    }

    fn is_ancestor(&self, anc: u32, mut id: u32) -> bool {
        let lvl = self.nodes[anc as usize].level;
        while id != NONE && self.nodes[id as usize].level <= lvl {
            if id == anc {
                return true;
            }
            id = self.nodes[id as usize].parent;
        }
        false
    }
}

/// MSERs of one polarity on `img`, where regions are lower level sets.
fn detect_lower(img: &GrayImage, cfg: &MserConfig) -> Vec<(Node, u8, Variation)> {
    let max_area = cfg.max_area_pixels(img.len());
    if max_area < cfg.min_area {
        return Vec::new();
    }
    let tree = ComponentTree::build(img);
    let st = Stability::new(&tree.nodes, cfg.delta as usize);

    let mut picked: Vec<(u32, u8, Variation)> = Vec::new();
    for (id, nd) in tree.nodes.iter().enumerate() {
        let area = nd.area as usize;
        if area < cfg.min_area || area > max_area {
            continue;
        }
        let id = id as u32;
        let mut best: Option<(usize, Variation)> = None;
        for t in nd.level as usize..=st.last_level(id) {
            let v = st.variation(id, t);
            if v.value() > cfg.max_variation || !st.is_local_min(id, t, &v) {
                continue;
            }
            if best.is_none_or(|(_, b)| v.cmp(&b) == Ordering::Less) {
                best = Some((t, v));
            }
        }
        if let Some((t, v)) = best {
            picked.push((id, t as u8, v));
        }
    }

    picked.sort_by(|a, b| {
        a.2.cmp(&b.2)
            .then(a.1.cmp(&b.1))
            .then(tree.nodes[a.0 as usize].first.cmp(&tree.nodes[b.0 as usize].first))
    });
    let mut kept: Vec<(u32, u8, Variation)> = Vec::new();
    for cand in picked {
        let ca = tree.nodes[cand.0 as usize].area as f64;
        let dup = kept.iter().any(|k| {
            let ka = tree.nodes[k.0 as usize].area as f64;
            let (small, large, anc, desc) = if ka >= ca {
                (ca, ka, k.0, cand.0)
            } else {
                (ka, ca, cand.0, k.0)
            };
            small / large > NESTED_DUPLICATE_RATIO && st.is_ancestor(anc, desc)
        });
        if !dup {
            kept.push(cand);
        }
    }
    kept.into_iter()
        .map(|(id, t, v)| (tree.nodes[id as usize], t, v))
        .collect()
}

fn to_region(img_w: usize, node: &Node, t: u8, v: &Variation, polarity: Polarity) -> ExtremalRegion {
    let [x0, y0, x1, y1] = node.bbox;
    let bbox = Rect::new(x0 as i32, y0 as i32, (x1 - x0 + 1) as i32, (y1 - y0 + 1) as i32);
    let level = match polarity {
        Polarity::DarkOnBright => t,
        Polarity::BrightOnDark => 255 - t,
    };
    ExtremalRegion {
        scale_index: 0,
        level,
        area: node.area,
        bbox,
        base_bbox: bbox,
        variation: v.value(),
        polarity,
        seed: (node.first % img_w as u32, node.first / img_w as u32),
    }
}

/// MSERs of a single image. Output is ordered dark regions first, each
/// polarity by ascending variation.
pub fn detect_mser(img: &GrayImage, cfg: &MserConfig) -> Result<Vec<ExtremalRegion>> {
    cfg.validate()?;
    let w = img.width();
    let mut out: Vec<ExtremalRegion> = detect_lower(img, cfg)
        .iter()
        .map(|(n, t, v)| to_region(w, n, *t, v, Polarity::DarkOnBright))
        .collect();
    if cfg.both_polarities {
        let inv = img.inverted();
        out.extend(
            detect_lower(&inv, cfg)
                .iter()
                .map(|(n, t, v)| to_region(w, n, *t, v, Polarity::BrightOnDark)),
        );
    }
    Ok(out)
}

/// MSERs over all pyramid levels, mapped to base coordinates, with
/// cross-scale duplicates merged in favour of the finest scale.
pub fn detect_mr_mser(pyr: &Pyramid, cfg: &MserConfig) -> Result<Vec<ExtremalRegion>> {
    cfg.validate()?;
    let base = pyr.base();
    let (bw, bh) = (base.width(), base.height());
    let per_level: Vec<Result<Vec<ExtremalRegion>>> = pyr
        .levels()
        .par_iter()
        .enumerate()
        .map(|(k, lvl)| {
            let mut regs = detect_mser(&lvl.image, cfg)?;
            for r in &mut regs {
                r.scale_index = k as u8;
                r.base_bbox = r
                    .bbox
                    .scaled(lvl.scale as i32)
                    .clip(bw, bh)
                    .unwrap_or(r.bbox);
            }
            Ok(regs)
        })
        .collect();
    let mut all = Vec::new();
    for regs in per_level {
        all.extend(regs?);
    }
    all.sort_by(|a, b| {
        a.scale_index
            .cmp(&b.scale_index)
            .then(a.bbox.cmp(&b.bbox))
            .then(a.level.cmp(&b.level))
            .then(a.polarity.cmp(&b.polarity))
            .then(a.seed.cmp(&b.seed))
    });
    let mut kept: Vec<ExtremalRegion> = Vec::with_capacity(all.len());
    for r in all {
        let dup = kept.iter().any(|k| {
            k.scale_index != r.scale_index && iou(&k.base_bbox, &r.base_bbox) > CROSS_SCALE_IOU
        });
        if !dup {
            kept.push(r);
        }
    }
    Ok(kept)
}

/// Serializes regions as JSON lines.
pub fn regions_to_jsonl(regions: &[ExtremalRegion]) -> Result<String> {
    let mut out = String::new();
    for r in regions {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn regions_from_jsonl(text: &str) -> Result<Vec<ExtremalRegion>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
