//! Scale-specific templates `t(h, w, sigma)`, the resolution-regime rule and
//! pruning into the A/B sets that run on the coarse pyramid.

use std::fmt::Write as _;

use crate::clustering::{CanonicalShapes, MAX_ASSIGN_DISTANCE};
use crate::error::{Error, Result};
use crate::geometry::{shape_jaccard_distance, Shape};

/// The coarse pyramid every bank is evaluated on.
pub const PYRAMID_SCALES: [f64; 3] = [0.5, 1.0, 2.0];

/// Objects taller than this are found with half-resolution templates.
pub const LARGE_OBJECT_HEIGHT: f64 = 140.0;
/// Objects shorter than this are found with double-resolution templates.
pub const SMALL_OBJECT_HEIGHT: f64 = 40.0;
/// Objects shorter than this get dedicated B templates on the 2x level.
pub const TINY_OBJECT_HEIGHT: f64 = 20.0;
/// A template is redundant when another one already detects a shape this close.
pub const SUBSUMPTION_DISTANCE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateSet {
    A,
    B,
}

impl TemplateSet {
    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateSet::A => "A",
            TemplateSet::B => "B",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankMode {
    /// One template per canonical shape, each run only at its own resolution.
    Full,
    /// A templates on every pyramid level, B templates on the 2x level only.
    Pruned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub target_h: f64,
    pub target_w: f64,
    pub sigma: f64,
    pub canonical_h: f64,
    pub canonical_w: f64,
    pub set: TemplateSet,
    pub channel: usize,
}

impl Template {
    pub fn new(target_h: f64, target_w: f64, sigma: f64, set: TemplateSet, channel: usize) -> Self {
        Template {
            target_h,
            target_w,
            sigma,
            canonical_h: sigma * target_h,
            canonical_w: sigma * target_w,
            set,
            channel,
        }
    }

    pub fn target(&self) -> Shape {
        Shape { h: self.target_h, w: self.target_w }
    }

    pub fn canonical(&self) -> Shape {
        Shape { h: self.canonical_h, w: self.canonical_w }
    }
}

/// A template removed by pruning and the (kept channel, pyramid scale) covering it.
#[derive(Debug, Clone, PartialEq)]
pub struct DroppedTemplate {
    pub target: Shape,
    pub sigma: f64,
    pub covered_by: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    pub templates: Vec<Template>,
    pub mode: BankMode,
    pub dropped: Vec<DroppedTemplate>,
}

/// Resolution at which a template for objects `target_h` pixels tall is built.
pub fn regime_sigma(target_h: f64) -> f64 {
    if target_h > LARGE_OBJECT_HEIGHT {
        0.5
    } else if target_h < SMALL_OBJECT_HEIGHT {
        2.0
    } else {
        1.0
    }
}

impl TemplateBank {
    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Whether `channel` is evaluated on the pyramid level of the given scale.
    pub fn is_active(&self, channel: usize, scale: f64) -> bool {
        let t = &self.templates[channel];
        match (self.mode, t.set) {
            (BankMode::Full, _) => scale == t.sigma,
            (BankMode::Pruned, TemplateSet::A) => PYRAMID_SCALES.contains(&scale),
            (BankMode::Pruned, TemplateSet::B) => scale == 2.0,
        }
    }

    pub fn active_channels(&self, scale: f64) -> Vec<usize> {
        (0..self.templates.len()).filter(|&c| self.is_active(c, scale)).collect()
    }

    /// Pyramid scales at which at least one channel is active.
    pub fn active_scales(&self) -> Vec<f64> {
        PYRAMID_SCALES.iter().copied().filter(|&s| !self.active_channels(s).is_empty()).collect()
    }

    /// Shapes detectable by every (template, active scale) pair.
    pub fn detectable_shapes(&self, pyramid_scales: &[f64]) -> Vec<(usize, f64, Shape)> {
        let mut out = Vec::new();
        for t in &self.templates {
            for &s in pyramid_scales {
                if self.is_active(t.channel, s) {
                    out.push((t.channel, s, t.canonical().scaled(1.0 / s)));
                }
            }
        }
        out
    }

    /// Canonical shapes that no active (template, scale) pair detects within
    /// Jaccard distance 0.5.
    pub fn uncovered(&self, canon: &CanonicalShapes) -> Vec<Shape> {
        let det = self.detectable_shapes(&PYRAMID_SCALES);
        canon
            .shapes
            .iter()
            .copied()
            .filter(|s| !det.iter().any(|(_, _, d)| shape_jaccard_distance(*d, *s) <= MAX_ASSIGN_DISTANCE))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mode = match self.mode {
            BankMode::Full => "full",
            BankMode::Pruned => "pruned",
        };
        let _ = writeln!(out, "# mode={mode}");
        out.push_str("channel,target_h,target_w,sigma,set\n");
        for t in &self.templates {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                t.channel,
                t.target_h,
                t.target_w,
                t.sigma,
                t.set.as_str()
            );
        }
        for d in &self.dropped {
            let _ = writeln!(
                out,
                "# dropped target_h={} target_w={} sigma={} covered_by={} scale={}",
                d.target.h, d.target.w, d.sigma, d.covered_by, d.scale
            );
        }
        out
    }

    pub fn from_csv(text: &str, path: &str) -> Result<Self> {
        let mut mode = BankMode::Pruned;
        let mut templates = Vec::new();
        let mut dropped = Vec::new();
        let mut header_seen = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(m) = comment.strip_prefix("mode=") {
                    mode = match m {
                        "full" => BankMode::Full,
                        "pruned" => BankMode::Pruned,
                        other => return Err(Error::parse(path, lineno, format!("unknown bank mode {other}"))),
                    };
                } else if let Some(rest) = comment.strip_prefix("dropped") {
                    dropped.push(parse_dropped(rest, path, lineno)?);
                }
                continue;
            }
            if !header_seen {
                if line != "channel,target_h,target_w,sigma,set" {
                    return Err(Error::parse(path, lineno, "expected bank CSV header"));
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::parse(path, lineno, "expected 5 columns"));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| Error::parse(path, lineno, format!("bad number {s:?}")))
            };
            let channel: usize =
                f[0].parse().map_err(|_| Error::parse(path, lineno, "bad channel index"))?;
            if channel != templates.len() {
                return Err(Error::parse(path, lineno, "channel indices must be dense and ordered"));
            }
            let set = match f[4] {
                "A" => TemplateSet::A,
                "B" => TemplateSet::B,
                other => return Err(Error::parse(path, lineno, format!("unknown set {other:?}"))),
            };
            let (h, w, sigma) = (num(f[1])?, num(f[2])?, num(f[3])?);
            if !(h > 0.0 && w > 0.0 && sigma > 0.0) {
                return Err(Error::parse(path, lineno, "template dimensions must be positive"));
            }
            templates.push(Template::new(h, w, sigma, set, channel));
        }
        if templates.is_empty() {
            return Err(Error::parse(path, text.lines().count(), "bank has no templates"));
        }
        Ok(TemplateBank { templates, mode, dropped })
    }
}

fn parse_dropped(rest: &str, path: &str, lineno: usize) -> Result<DroppedTemplate> {
    let mut vals = [f64::NAN; 5];
    let keys = ["target_h", "target_w", "sigma", "covered_by", "scale"];
    for tok in rest.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::parse(path, lineno, format!("bad dropped field {tok:?}")))?;
        let pos = keys
            .iter()
            .position(|key| *key == k)
            .ok_or_else(|| Error::parse(path, lineno, format!("unknown dropped field {k:?}")))?;
        vals[pos] = v.parse().map_err(|_| Error::parse(path, lineno, format!("bad number {v:?}")))?;
    }
    if vals.iter().any(|v| v.is_nan()) {
        return Err(Error::parse(path, lineno, "incomplete dropped record"));
    }
    Ok(DroppedTemplate {
        target: Shape { h: vals[0], w: vals[1] },
        sigma: vals[2],
        covered_by: vals[3] as usize,
        scale: vals[4],
    })
}

/// Builds the template bank for a set of canonical shapes.
///
/// Unpruned, every shape gets one template at `regime_sigma(h)`. Pruned,
/// shapes under 20 px become B templates at 2x; every other shape becomes an
/// A template whose canonical (network-frame) size is run at 1x on every
/// pyramid level. Candidates are visited 1x-regime first, then 0.5x, then 2x,
/// then B, each in ascending height; a candidate whose target shape is already
/// detected within distance 0.25 by a kept template at one of its active
/// scales is dropped.
pub fn build_bank(canon: &CanonicalShapes, prune: bool) -> Result<TemplateBank> {
    if canon.shapes.is_empty() {
        return Err(Error::Config("cannot build a bank from an empty canonical set".into()));
    }
    if !prune {
        let templates = canon
            .shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let sigma = regime_sigma(s.h);
                let set = if s.h < TINY_OBJECT_HEIGHT { TemplateSet::B } else { TemplateSet::A };
                Template::new(s.h, s.w, sigma, set, i)
            })
            .collect();
        return Ok(TemplateBank { templates, mode: BankMode::Full, dropped: Vec::new() });
    }

    let rank = |s: &Shape| -> u8 {
        if s.h < TINY_OBJECT_HEIGHT {
            3
        } else {
            match regime_sigma(s.h) {
                1.0 => 0,
                0.5 => 1,
                _ => 2,
            }
        }
    };
    let mut order: Vec<Shape> = canon.shapes.clone();
    order.sort_by(|a, b| rank(a).cmp(&rank(b)).then(a.h.total_cmp(&b.h)).then(a.w.total_cmp(&b.w)));

    let mut bank = TemplateBank { templates: Vec::new(), mode: BankMode::Pruned, dropped: Vec::new() };
    for s in order {
        let sigma = regime_sigma(s.h);
        let cover = bank
            .detectable_shapes(&PYRAMID_SCALES)
            .into_iter()
            .map(|(c, scale, d)| (c, scale, shape_jaccard_distance(d, s)))
            .filter(|&(_, _, d)| d <= SUBSUMPTION_DISTANCE)
            .min_by(|a, b| a.2.total_cmp(&b.2));
        if let Some((covered_by, scale, _)) = cover {
            bank.dropped.push(DroppedTemplate { target: s, sigma, covered_by, scale });
            continue;
        }
        let channel = bank.templates.len();
        let t = if s.h < TINY_OBJECT_HEIGHT {
            Template::new(s.h, s.w, 2.0, TemplateSet::B, channel)
        } else {
            let c = s.scaled(sigma);
            Template::new(c.h, c.w, 1.0, TemplateSet::A, channel)
        };
        bank.templates.push(t);
    }

    // Dense channels in ascending canonical height, B after A.
    let mut templates = bank.templates;
    let mut idx: Vec<usize> = (0..templates.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ta, tb) = (&templates[a], &templates[b]);
        (ta.set == TemplateSet::B)
            .cmp(&(tb.set == TemplateSet::B))
            .then(ta.canonical_h.total_cmp(&tb.canonical_h))
            .then(ta.canonical_w.total_cmp(&tb.canonical_w))
    });
    let mut remap = vec![0usize; idx.len()];
    for (new, &old) in idx.iter().enumerate() {
        remap[old] = new;
    }
    let mut sorted: Vec<Template> = idx.iter().map(|&i| templates[i].clone()).collect();
    for (i, t) in sorted.iter_mut().enumerate() {
        t.channel = i;
    }
    templates = sorted;
    let dropped = bank
        .dropped
        .into_iter()
        .map(|d| DroppedTemplate { covered_by: remap[d.covered_by], ..d })
        .collect();
    Ok(TemplateBank { templates, mode: BankMode::Pruned, dropped })
}

/// Distinct target heights detectable by the bank on the given pyramid scales.
pub fn coverage(bank: &TemplateBank, pyramid_scales: &[f64]) -> Vec<f64> {
    let mut hs: Vec<f64> = bank.detectable_shapes(pyramid_scales).into_iter().map(|(_, _, s)| s.h).collect();
    hs.sort_by(f64::total_cmp);
    hs.dedup();
    hs
}
