//! Rule-driven rectilinear pattern generator and a row/column design-rule checker.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LadaError, Result};
use crate::image::{BinaryImage, MaskImage, CANVAS};
use crate::rng;

/// Rejections allowed per rectangle before placement stops.
pub const MAX_REJECTIONS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignRules {
    pub min_width: usize,
    pub min_space: usize,
    /// inclusive
    pub rect_count: [usize; 2],
    /// inclusive, pixels
    pub side_range: [usize; 2],
    /// (H, W)
    pub canvas: [usize; 2],
}

impl DesignRules {
    /// Rules for the initial training set.
    pub fn training() -> Self {
        DesignRules {
            min_width: 6,
            min_space: 4,
            rect_count: [2, 6],
            side_range: [6, 20],
            canvas: [CANVAS, CANVAS],
        }
    }

    /// Shifted rules for held-out evaluation patterns.
    pub fn shifted_test() -> Self {
        DesignRules {
            min_width: 5,
            min_space: 3,
            rect_count: [3, 8],
            side_range: [5, 28],
            canvas: [CANVAS, CANVAS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LadaError::InvalidConfig(m));
        if self.min_width < 1 {
            return bad("min_width must be >= 1".into());
        }
        if self.rect_count[0] > self.rect_count[1] || self.rect_count[1] == 0 {
            return bad(format!("empty rect_count range {:?}", self.rect_count));
        }
        if self.side_range[0] > self.side_range[1] {
            return bad(format!("empty side_range {:?}", self.side_range));
        }
        if self.side_range[0] < self.min_width {
            return bad(format!(
                "side_range low {} below min_width {}",
                self.side_range[0], self.min_width
            ));
        }
        if self.canvas[0] == 0 || self.canvas[1] == 0 {
            return bad("canvas must be non-empty".into());
        }
        if self.side_range[0] > self.canvas[0].min(self.canvas[1]) {
            return bad(format!(
                "side_range low {} does not fit the {:?} canvas",
                self.side_range[0], self.canvas
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn gap_1d(a0: usize, a1: usize, b0: usize, b1: usize) -> usize {
        b0.saturating_sub(a1).max(a0.saturating_sub(b1))
    }

    /// Chebyshev gap between half-open rectangles; 0 when they touch or overlap.
    fn gap(&self, o: &Rect) -> usize {
        Self::gap_1d(self.x, self.x + self.w, o.x, o.x + o.w).max(Self::gap_1d(self.y, self.y + self.h, o.y, o.y + o.h))
    }

    fn overlaps(&self, o: &Rect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }

    fn paint(&self, m: &mut BinaryImage) {
        for y in self.y..self.y + self.h {
            for x in self.x..self.x + self.w {
                m.set(y, x, true);
            }
        }
    }
}

/// Draws a rule-compliant pattern. Deterministic in `(rules, seed)`.
pub fn generate_pattern(rules: &DesignRules, seed: u64) -> Result<MaskImage> {
    rules.validate()?;
    let mut r = rng::rng(seed);
    let [ch, cw] = rules.canvas;
    let n = r.random_range(rules.rect_count[0]..=rules.rect_count[1]);
    let mut placed: Vec<Rect> = Vec::with_capacity(n);
    let mut mask = BinaryImage::zeros(ch, cw);
    'outer: for _ in 0..n {
        for _ in 0..MAX_REJECTIONS {
            let h = r.random_range(rules.side_range[0]..=rules.side_range[1].min(ch));
            let w = r.random_range(rules.side_range[0]..=rules.side_range[1].min(cw));
            let cand = Rect {
                y: r.random_range(0..=ch - h),
                x: r.random_range(0..=cw - w),
                h,
                w,
            };
            let compatible = placed
                .iter()
                .all(|p| cand.overlaps(p) || cand.gap(p) >= rules.min_space);
            if !compatible {
                continue;
            }
            let mut next = mask.clone();
            cand.paint(&mut next);
            if !verify_rules(&next, rules).is_empty() {
                continue;
            }
            placed.push(cand);
            mask = next;
            continue 'outer;
        }
        break;
    }
    Ok(mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Width,
    Space,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Row,
    Column,
}

/// One offending region: violating runs on consecutive lines whose spans
/// overlap are reported together.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub axis: Axis,
    /// first and last line (row or column index), inclusive
    pub lines: [usize; 2],
    /// smallest and largest offending run length seen
    pub run: [usize; 2],
    /// union of spans along the line, half-open
    pub span: [usize; 2],
}

/// 4-connected component labels; 0 = background.
fn label_components(m: &BinaryImage) -> Vec<u32> {
    let (h, w) = m.dims();
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if m.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if m.data()[q] != 0 && labels[q] == 0 {
                    labels[q] = next;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
    }
    labels
}

struct Run {
    line: usize,
    start: usize,
    len: usize,
}

fn scan_line(
    cells: &[(bool, u32)],
    line: usize,
    rules: &DesignRules,
    narrow: &mut Vec<Run>,
    tight: &mut Vec<Run>,
) {
    let n = cells.len();
    let mut i = 0;
    while i < n {
        let fg = cells[i].0;
        let start = i;
        while i < n && cells[i].0 == fg {
            i += 1;
        }
        let len = i - start;
        if fg {
            if len < rules.min_width {
                narrow.push(Run { line, start, len });
            }
        } else if start > 0 && i < n && len < rules.min_space && cells[start - 1].1 != cells[i].1 {
            tight.push(Run { line, start, len });
        }
    }
}

fn group(runs: Vec<Run>, kind: ViolationKind, axis: Axis) -> Vec<Violation> {
    let mut out: Vec<Violation> = Vec::new();
    for r in runs {
        let end = r.start + r.len;
        let hit = out.iter_mut().rev().find(|v| {
            v.kind == kind && v.lines[1] + 1 == r.line && r.start < v.span[1] && v.span[0] < end
        });
        match hit {
            Some(v) => {
                v.lines[1] = r.line;
                v.run = [v.run[0].min(r.len), v.run[1].max(r.len)];
                v.span = [v.span[0].min(r.start), v.span[1].max(end)];
            }
            None => out.push(Violation {
                kind,
                axis,
                lines: [r.line, r.line],
                run: [r.len, r.len],
                span: [r.start, end],
            }),
        }
    }
    out
}

/// Reports foreground runs narrower than `min_width` and background gaps
/// between distinct components shorter than `min_space`, per row and column.
pub fn verify_rules(mask: &MaskImage, rules: &DesignRules) -> Vec<Violation> {
    let (h, w) = mask.dims();
    let labels = label_components(mask);
    let cell = |y: usize, x: usize| (mask.get(y, x), labels[y * w + x]);
    let mut out = Vec::new();
    for axis in [Axis::Row, Axis::Column] {
        let (lines, len) = match axis {
            Axis::Row => (h, w),
            Axis::Column => (w, h),
        };
        let (mut narrow, mut tight) = (Vec::new(), Vec::new());
        for l in 0..lines {
            let cells: Vec<(bool, u32)> = (0..len)
                .map(|i| match axis {
                    Axis::Row => cell(l, i),
                    Axis::Column => cell(i, l),
                })
                .collect();
            scan_line(&cells, l, rules, &mut narrow, &mut tight);
        }
        out.extend(group(narrow, ViolationKind::Width, axis));
        out.extend(group(tight, ViolationKind::Space, axis));
    }
    out
}
