//! Morphological thinning to one-pixel-wide, 8-connected curves.
//!
//! Two-subiteration parallel thinning (Lam, Lee and Suen), the algorithm
//! behind the usual boundary-benchmark preprocessing. Pixels outside the
//! map count as background.

/// Neighbors `x1..x8` counter-clockwise from east, as `(dy, dx)`.
const RING: [(isize, isize); 8] = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)];

fn neighbors(map: &[bool], h: usize, w: usize, y: usize, x: usize) -> [bool; 8] {
    RING.map(|(dy, dx)| {
        let (ny, nx) = (y as isize + dy, x as isize + dx);
        ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && map[ny as usize * w + nx as usize]
    })
}

/// Whether the center pixel may be removed in subiteration `first` or second.
fn deletable(n: [bool; 8], first: bool) -> bool {
    let x = |i: usize| n[(i - 1) % 8];
    // G1: exactly one 8-connected run of foreground around the pixel
    let crossings = (1..=4).filter(|&i| !x(2 * i - 1) && (x(2 * i) || x(2 * i + 1))).count();
    if crossings != 1 {
        return false;
    }
    // G2: endpoints and interior pixels stay
    let n1 = (1..=4).filter(|&k| x(2 * k - 1) || x(2 * k)).count();
    let n2 = (1..=4).filter(|&k| x(2 * k) || x(2 * k + 1)).count();
    let m = n1.min(n2);
    if !(2..=3).contains(&m) {
        return false;
    }
    // G3 / G3': remove from alternating sides
    if first {
        !((x(2) || x(3) || !x(8)) && x(1))
    } else {
        !((x(6) || x(7) || !x(4)) && x(5))
    }
}

/// Thins `map` (row-major `h x w`) until no pixel can be removed.
pub fn thin(map: &[bool], h: usize, w: usize) -> Vec<bool> {
    assert_eq!(map.len(), h * w, "map size does not match {h}x{w}");
    let mut cur = map.to_vec();
    loop {
        let mut changed = false;
        for first in [true, false] {
            let remove: Vec<usize> = (0..h * w)
                .filter(|&i| cur[i] && deletable(neighbors(&cur, h, w, i / w, i % w), first))
                .collect();
            changed |= !remove.is_empty();
            for i in remove {
                cur[i] = false;
            }
        }
        if !changed {
            return cur;
        }
    }
}
