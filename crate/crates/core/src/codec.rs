//! Fixed-rate quantizer shared by encoder and controller.
//!
//! In normal mode the interval `[-P·M, P·M]` (with `M` the previous range
//! estimate) is cut into `2L` equal cells; symbols `0..2L` index them left to
//! right and symbol `2L` is the emergency codeword. Because `L` is an integer,
//! 0 is always a cell endpoint and no cell straddles the origin.
//!
//! Cells are half-open `[a, b)` except the rightmost, which is closed. A state
//! of exactly 0 therefore lands in `[0, w)` with sign `+1`.
//!
//! Endpoints are computed as `k·w` for the signed cell offset `k = symbol − L`
//! (and `±P·M` exactly at the two outer edges). This is the same point as
//! `−P·M + symbol·δ·P·M` but does not lose the low-order digits of small
//! states when `P·M` is huge.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Wire symbol. `L` can exceed `u64` for the parameter sizes the stability
/// analysis asks for, so symbols are 128-bit.
pub type Symbol = u128;

/// Constants of the zoom strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyParams {
    /// `L = 1/δ`: cells on each side of the origin.
    pub levels: u128,
    /// `P > 1`: zoom-out factor and partition half-width multiplier.
    pub zoom: f64,
    /// `M0 > 0`: lower clamp for the range and error trackers.
    pub range_floor: f64,
    /// `K > 0`: weight of the error tracker in the Lyapunov-like quantity.
    pub error_weight: f64,
    /// `c ∈ (0, 3/4)`: targeted per-step contraction.
    pub decay_rate: f64,
}

impl StrategyParams {
    /// Largest `L` for which `2L` still fits in a symbol.
    pub const MAX_LEVELS: u128 = (u128::MAX - 1) / 2;

    pub fn new(levels: u128, zoom: f64, range_floor: f64, error_weight: f64, decay_rate: f64) -> Result<Self> {
        let p = Self {
            levels,
            zoom,
            range_floor,
            error_weight,
            decay_rate,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if self.levels < 1 || self.levels > Self::MAX_LEVELS {
            return bad(format!("L must be in [1, {}], got {}", Self::MAX_LEVELS, self.levels));
        }
        if !(self.zoom > 1.0) || !self.zoom.is_finite() {
            return bad(format!("P must be finite and > 1, got {}", self.zoom));
        }
        if !(self.range_floor > 0.0) || !self.range_floor.is_finite() {
            return bad(format!("M0 must be finite and > 0, got {}", self.range_floor));
        }
        if !(self.error_weight > 0.0) || !self.error_weight.is_finite() {
            return bad(format!("K must be finite and > 0, got {}", self.error_weight));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate < 0.75) {
            return bad(format!("c must lie in (0, 3/4), got {}", self.decay_rate));
        }
        Ok(())
    }

    /// `δ = 1/L`.
    pub fn delta(&self) -> f64 {
        1.0 / self.levels as f64
    }

    /// Codebook size `2L + 1`.
    pub fn num_symbols(&self) -> u128 {
        2 * self.levels + 1
    }

    pub fn emergency_symbol(&self) -> Symbol {
        2 * self.levels
    }

    /// Normal-mode partition for a previous range estimate `m_prev`.
    pub fn partition(&self, m_prev: f64) -> Partition {
        Partition::new(self.zoom * m_prev, self.levels)
    }
}

/// Bits per channel use: `⌈log2(2L + 1)⌉`.
pub fn rate(params: &StrategyParams) -> u32 {
    rate_for_levels(params.levels)
}

pub fn rate_for_levels(levels: u128) -> u32 {
    // ⌈log2(n)⌉ is the bit length of n − 1 = 2L.
    u128::BITS - (2 * levels).leading_zeros()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Codeword(pub Symbol);

impl Codeword {
    pub fn is_emergency(&self, params: &StrategyParams) -> bool {
        self.0 == params.emergency_symbol()
    }
}

/// A partition cell `[a, b)` (closed on the right for the outermost cell).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub a: f64,
    pub b: f64,
}

impl Cell {
    pub fn width(&self) -> f64 {
        self.b - self.a
    }

    /// Sign shared by both endpoints; a cell touching 0 takes the sign of its
    /// other endpoint.
    pub fn sign(&self) -> i8 {
        if self.a >= 0.0 {
            1
        } else {
            -1
        }
    }

    /// Tracker values `(M, I, ρ)` implied by this cell.
    pub fn tracker(&self, range_floor: f64) -> TrackerUpdate {
        TrackerUpdate {
            range: range_floor.max(self.a.abs()).max(self.b.abs()),
            error_bound: range_floor.max(0.5 * (self.b - self.a)),
            sign: self.sign(),
        }
    }

    /// True when neither `M0` clamp changes the tracker values.
    pub fn is_unclamped(&self, range_floor: f64) -> bool {
        self.a.abs().max(self.b.abs()) >= range_floor && 0.5 * (self.b - self.a) >= range_floor
    }
}

/// New `(M, I, ρ)` after a normal-mode symbol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerUpdate {
    pub range: f64,
    pub error_bound: f64,
    pub sign: i8,
}

/// `2L` equal cells tiling `[-h, h]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Partition {
    half_width: f64,
    levels: u128,
    width: f64,
}

impl Partition {
    pub fn new(half_width: f64, levels: u128) -> Self {
        Self {
            half_width,
            levels,
            width: half_width / levels as f64,
        }
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// Nominal cell width `h / L`.
    pub fn cell_width(&self) -> f64 {
        self.width
    }

    pub fn contains(&self, x: f64) -> bool {
        x.abs() <= self.half_width
    }

    fn lowest(&self) -> i128 {
        -(self.levels as i128)
    }

    /// Edge `k ∈ [−L, L]`.
    fn edge(&self, k: i128) -> f64 {
        let l = self.levels as i128;
        if k == l {
            self.half_width
        } else if k == -l {
            -self.half_width
        } else {
            k as f64 * self.width
        }
    }

    /// Signed offset `k` of the cell `[edge(k), edge(k+1))` holding `x`: the
    /// largest `k ≤ L − 1` with `edge(k) ≤ x`.
    ///
    /// Edges are monotone but adjacent ones may coincide once `k·w` exceeds
    /// the float resolution, so the estimate is settled by galloping and
    /// bisection rather than unit steps.
    fn offset_of(&self, x: f64) -> i128 {
        let l = self.levels as i128;
        let guess = ((x / self.width).floor() as i128).clamp(-l, l - 1);
        let (mut lo, mut hi) = if self.edge(guess) <= x {
            let (mut lo, mut step) = (guess, 1i128);
            loop {
                let probe = lo.saturating_add(step).min(l);
                if probe == l || self.edge(probe) > x {
                    break (lo, probe);
                }
                lo = probe;
                step = step.saturating_mul(2);
            }
        } else {
            let (mut hi, mut step) = (guess, 1i128);
            loop {
                let probe = hi.saturating_sub(step).max(-l);
                if probe == -l || self.edge(probe) <= x {
                    break (probe, hi);
                }
                hi = probe;
                step = step.saturating_mul(2);
            }
        };
        // edge(lo) ≤ x or lo = −L; edge(hi) > x or hi = L.
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.edge(mid) <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo.min(l - 1)
    }

    pub fn encode(&self, x: f64) -> Result<Codeword> {
        if !x.is_finite() || !self.contains(x) {
            return Err(Error::OutOfPartition {
                x,
                half_width: self.half_width,
            });
        }
        Ok(Codeword((self.offset_of(x) - self.lowest()) as Symbol))
    }

    pub fn cell(&self, symbol: Symbol) -> Result<Cell> {
        if symbol >= 2 * self.levels {
            return Err(Error::Protocol(format!(
                "symbol {symbol} has no cell (emergency or unused codeword; 2L = {})",
                2 * self.levels
            )));
        }
        let k = symbol as i128 + self.lowest();
        Ok(Cell {
            a: self.edge(k),
            b: self.edge(k + 1),
        })
    }
}

/// Symbol of the cell holding `x` in the partition of `[-P·m_prev, P·m_prev]`.
pub fn encode_normal(x: f64, m_prev: f64, params: &StrategyParams) -> Result<Codeword> {
    params.partition(m_prev).encode(x)
}

pub fn cell_of(symbol: Symbol, m_prev: f64, params: &StrategyParams) -> Result<Cell> {
    params.partition(m_prev).cell(symbol)
}

/// `M = max(M0, |a|, |b|)`, `I = max(M0, (b − a)/2)`, `ρ = sgn(a) = sgn(b)`.
pub fn tracker_update_normal(symbol: Symbol, m_prev: f64, params: &StrategyParams) -> Result<TrackerUpdate> {
    Ok(cell_of(symbol, m_prev, params)?.tracker(params.range_floor))
}

/// Bytes needed for an `R`-bit field.
pub fn wire_len(rate_bits: u32) -> usize {
    rate_bits.div_ceil(8) as usize
}

/// Little-endian `R`-bit field, padded to whole bytes with zero bits.
pub fn to_wire(cw: Codeword, params: &StrategyParams) -> Vec<u8> {
    let len = wire_len(rate(params));
    cw.0.to_le_bytes()[..len].to_vec()
}

/// Inverse of [`to_wire`]. Padding bits must be zero and unused codewords
/// (`2L < symbol < 2^R`) are rejected.
pub fn from_wire(bytes: &[u8], params: &StrategyParams) -> Result<Codeword> {
    let bits = rate(params);
    if bytes.len() != wire_len(bits) {
        return Err(Error::Protocol(format!(
            "expected {} bytes for a {bits}-bit symbol, got {}",
            wire_len(bits),
            bytes.len()
        )));
    }
    let mut buf = [0u8; 16];
    buf[..bytes.len()].copy_from_slice(bytes);
    let symbol = u128::from_le_bytes(buf);
    if bits < 128 && symbol >> bits != 0 {
        return Err(Error::Protocol(format!("padding bits set in {bits}-bit field")));
    }
    if symbol > params.emergency_symbol() {
        return Err(Error::Protocol(format!(
            "unused codeword {symbol} (codebook has {} symbols)",
            params.num_symbols()
        )));
    }
    Ok(Codeword(symbol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(levels: u128, zoom: f64, floor: f64) -> StrategyParams {
        StrategyParams::new(levels, zoom, floor, 2.0, 0.2).unwrap()
    }

    #[test]
    fn rate_examples() {
        assert_eq!(rate(&params(2, 2.0, 0.1)), 3);
        assert_eq!(params(2, 2.0, 0.1).num_symbols(), 5);
        assert_eq!(rate(&params(1, 2.0, 0.1)), 2);
        assert_eq!(rate(&params(8, 2.0, 0.1)), 5);
        assert_eq!(params(8, 2.0, 0.1).num_symbols(), 17);
        for (l, r) in [(1u128, 2u32), (2, 3), (3, 3), (4, 4), (16, 6), (1 << 72, 74)] {
            assert_eq!(rate_for_levels(l), r, "L = {l}");
            assert!(2 * l < 1u128 << r && 2 * l + 1 > 1u128 << (r - 1));
        }
    }

    #[test]
    fn encode_examples() {
        let p = params(2, 2.0, 0.1);
        assert_eq!(encode_normal(1.3, 1.0, &p).unwrap(), Codeword(3));
        assert_eq!(encode_normal(0.0, 1.0, &p).unwrap(), Codeword(2));
        assert_eq!(encode_normal(-2.0, 1.0, &p).unwrap(), Codeword(0));
        assert_eq!(encode_normal(2.0, 1.0, &p).unwrap(), Codeword(3));
        assert_eq!(encode_normal(-0.0, 1.0, &p).unwrap(), Codeword(2));
        assert!(matches!(
            encode_normal(2.0001, 1.0, &p),
            Err(Error::OutOfPartition { .. })
        ));
        assert!(encode_normal(f64::NAN, 1.0, &p).is_err());
    }

    #[test]
    fn cell_examples() {
        let p = params(2, 2.0, 0.1);
        assert_eq!(cell_of(3, 1.0, &p).unwrap(), Cell { a: 1.0, b: 2.0 });
        assert_eq!(cell_of(0, 1.0, &p).unwrap(), Cell { a: -2.0, b: -1.0 });
        assert!(matches!(cell_of(4, 1.0, &p), Err(Error::Protocol(_))));
    }

    #[test]
    fn tracker_examples() {
        let p = params(2, 2.0, 0.1);
        let t = tracker_update_normal(3, 1.0, &p).unwrap();
        assert_eq!((t.range, t.error_bound, t.sign), (2.0, 0.5, 1));
        let t = tracker_update_normal(2, 1.0, &p).unwrap();
        assert_eq!((t.range, t.error_bound, t.sign), (1.0, 0.5, 1));
        let p = params(2, 2.0, 0.6);
        let t = tracker_update_normal(1, 1.0, &p).unwrap();
        assert_eq!((t.range, t.error_bound, t.sign), (1.0, 0.6, -1));
        assert!(tracker_update_normal(4, 1.0, &p).is_err());
    }

    #[test]
    fn wire_round_trip_and_rejections() {
        let p = params(2, 2.0, 0.1);
        assert_eq!(to_wire(Codeword(3), &p), vec![3u8]);
        assert_eq!(from_wire(&[4], &p).unwrap(), Codeword(4));
        assert!(from_wire(&[5], &p).is_err(), "5..7 are unused with R = 3");
        assert!(from_wire(&[8], &p).is_err(), "bit beyond R");
        assert!(from_wire(&[0, 0], &p).is_err());

        let big = params(1u128 << 72, 2.0, 0.1);
        assert_eq!(rate(&big), 74);
        let cw = Codeword(big.emergency_symbol());
        let bytes = to_wire(cw, &big);
        assert_eq!(bytes.len(), 10);
        assert_eq!(from_wire(&bytes, &big).unwrap(), cw);
    }

    #[test]
    fn huge_partitions_resolve_small_states() {
        // P·M0 ~ 3e21 with cells of width 0.4: the cell holding a small state
        // must still be exact.
        let p = StrategyParams::new(7_537_691_768_106_688_000_000, 7.537_691_768_106_688e20, 4.0, 2.0, 0.2).unwrap();
        for x in [0.0, 0.1, -0.1, 3.9, -3.9, 12.345, -1e-300] {
            let cw = encode_normal(x, 4.0, &p).unwrap();
            let cell = cell_of(cw.0, 4.0, &p).unwrap();
            assert!(cell.a <= x && x < cell.b, "x {x} cell {cell:?}");
            assert!((cell.width() - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn sub_resolution_cells_encode_quickly() {
        // Cells ~5e-21 wide: many adjacent edges round to the same float.
        let part = Partition::new(40.0, 8_098_920_141_268_634_828_800);
        for x in [39.999, -39.999, 40.0, -40.0, 17.3, -0.25, 1e-30, 0.0] {
            let cw = part.encode(x).unwrap();
            let cell = part.cell(cw.0).unwrap();
            assert!(cell.a <= x && (x < cell.b || (x == 40.0 && cell.b == 40.0)), "x {x} cell {cell:?}");
            if cw.0 + 1 < 2 * part.levels {
                assert!(part.cell(cw.0 + 1).unwrap().a > x, "x {x} must sit in the last cell starting at or below it");
            }
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(StrategyParams::new(0, 2.0, 1.0, 1.0, 0.2).is_err());
        assert!(StrategyParams::new(2, 1.0, 1.0, 1.0, 0.2).is_err());
        assert!(StrategyParams::new(2, 2.0, 0.0, 1.0, 0.2).is_err());
        assert!(StrategyParams::new(2, 2.0, 1.0, 0.0, 0.2).is_err());
        assert!(StrategyParams::new(2, 2.0, 1.0, 1.0, 0.75).is_err());
        assert!(StrategyParams::new(StrategyParams::MAX_LEVELS + 1, 2.0, 1.0, 1.0, 0.2).is_err());
    }

    fn arb_params() -> impl Strategy<Value = StrategyParams> {
        (1u128..5000, 1.01f64..50.0, 0.01f64..10.0).prop_map(|(l, zoom, floor)| params(l, zoom, floor))
    }

    proptest! {
        #[test]
        fn encoded_cell_contains_state(p in arb_params(), m_prev in 0.01f64..1e6, u in -1.0f64..=1.0) {
            let m_prev = m_prev.max(p.range_floor);
            let x = u * p.zoom * m_prev;
            let cw = encode_normal(x, m_prev, &p).unwrap();
            prop_assert!(cw.0 < 2 * p.levels);
            let cell = cell_of(cw.0, m_prev, &p).unwrap();
            let rightmost = cw.0 == 2 * p.levels - 1;
            prop_assert!(cell.a <= x && (x < cell.b || (rightmost && x <= cell.b)), "{x} {cell:?}");
        }

        #[test]
        fn tracker_invariants_and_containment(p in arb_params(), m_prev in 0.01f64..1e6, u in -1.0f64..=1.0) {
            let m_prev = m_prev.max(p.range_floor);
            let x = u * p.zoom * m_prev;
            let cw = encode_normal(x, m_prev, &p).unwrap();
            let t = tracker_update_normal(cw.0, m_prev, &p).unwrap();
            prop_assert!(t.range >= p.range_floor);
            prop_assert!(t.error_bound >= p.range_floor);
            prop_assert!(t.error_bound <= t.range);
            // Containment x ∈ ρ[M − 2I, M]; it also survives the clamps.
            let s = f64::from(t.sign);
            let lo = (s * (t.range - 2.0 * t.error_bound)).min(s * t.range);
            let hi = (s * (t.range - 2.0 * t.error_bound)).max(s * t.range);
            prop_assert!(lo <= x && x <= hi, "x {x} not in [{lo}, {hi}]");
        }

        #[test]
        fn cells_tile_the_interval(levels in 1u128..300, half in 1e-3f64..1e9) {
            let part = Partition::new(half, levels);
            let mut prev_b = -half;
            for s in 0..2 * levels {
                let c = part.cell(s).unwrap();
                prop_assert_eq!(c.a, prev_b);
                prop_assert!(c.b > c.a);
                prop_assert!((c.width() - half / levels as f64).abs() <= 1e-9 * half);
                prop_assert!(c.a >= 0.0 || c.b <= 0.0, "cell straddles 0");
                prev_b = c.b;
            }
            prop_assert_eq!(prev_b, half);
        }

        #[test]
        fn wire_round_trip(p in arb_params(), s in 0u128..10_001) {
            let cw = Codeword(s % p.num_symbols());
            prop_assert_eq!(from_wire(&to_wire(cw, &p), &p).unwrap(), cw);
        }
    }
}
