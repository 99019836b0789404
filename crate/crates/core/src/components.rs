//! 8-connected component labelling of binary masks.
//!
//! Two raster passes over a union-find forest. Labels are `1..=count` in the
//! order each component's first pixel is met in row-major scan; 0 is
//! background.

use crate::raster::Mask;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
    pub count: usize,
}

/// One component: its label and member pixels `(row, col)` in scan order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub label: u32,
    pub pixels: Vec<(usize, usize)>,
}

impl Component {
    pub fn area_px(&self) -> usize {
        self.pixels.len()
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let up = parent[parent[x as usize] as usize];
        parent[x as usize] = up;
        x = up;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

pub fn label(mask: &Mask) -> Labels {
    let (h, w) = (mask.height, mask.width);
    let mut provisional = vec![0u32; h * w];
    let mut parent: Vec<u32> = vec![0];
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) == 0 {
                continue;
            }
            // already-visited neighbours: W, NW, N, NE
            let mut seen = [0u32; 4];
            let mut k = 0;
            if c > 0 {
                seen[k] = provisional[r * w + c - 1];
                k += 1;
            }
            if r > 0 {
                if c > 0 {
                    seen[k] = provisional[(r - 1) * w + c - 1];
                    k += 1;
                }
                seen[k] = provisional[(r - 1) * w + c];
                k += 1;
                if c + 1 < w {
                    seen[k] = provisional[(r - 1) * w + c + 1];
                    k += 1;
                }
            }
            let mut chosen = 0;
            for &l in seen[..k].iter().filter(|&&l| l != 0) {
                if chosen == 0 {
                    chosen = l;
                } else {
                    union(&mut parent, chosen, l);
                }
            }
            if chosen == 0 {
                chosen = parent.len() as u32;
                parent.push(chosen);
            }
            provisional[r * w + c] = chosen;
        }
    }
    let mut remap = vec![0u32; parent.len()];
    let mut count = 0u32;
    let mut data = provisional;
    for v in data.iter_mut() {
        if *v == 0 {
            continue;
        }
        let root = find(&mut parent, *v) as usize;
        if remap[root] == 0 {
            count += 1;
            remap[root] = count;
        }
        *v = remap[root];
    }
    Labels {
        height: h,
        width: w,
        data,
        count: count as usize,
    }
}

pub fn components(mask: &Mask) -> Vec<Component> {
    let labels = label(mask);
    let mut out: Vec<Component> = (1..=labels.count as u32)
        .map(|label| Component {
            label,
            pixels: Vec::new(),
        })
        .collect();
    for (i, &l) in labels.data.iter().enumerate() {
        if l != 0 {
            out[l as usize - 1].pixels.push((i / labels.width, i % labels.width));
        }
    }
    out
}
