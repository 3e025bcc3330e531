//! Counter-based random numbers.
//!
//! Every Gaussian increment is a pure function of
//! `(master seed, stream id, step, component)`: the tuple is fed through
//! Philox4x32-10 and each 64-bit half of the output is turned into a standard
//! normal by the inverse distribution function. Nothing is carried between calls, so paths
//! can be evaluated in any order, on any number of workers, and replayed
//! exactly for common-random-number comparisons.

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

/// Philox4x32 with 10 rounds.
#[inline]
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for _ in 0..10 {
        let p0 = u64::from(PHILOX_M0) * u64::from(c[0]);
        let p1 = u64::from(PHILOX_M1) * u64::from(c[2]);
        let (hi0, lo0) = ((p0 >> 32) as u32, p0 as u32);
        let (hi1, lo1) = ((p1 >> 32) as u32, p1 as u32);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
        k = [k[0].wrapping_add(PHILOX_W0), k[1].wrapping_add(PHILOX_W1)];
    }
    c
}

/// SplitMix64 finalizer, used only to derive independent seeds from labels.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Labels for [`derive_seed`]; one per independent family of streams.
pub mod purpose {
    pub const STATIONARY: u64 = 1;
    pub const RESPONSE: u64 = 2;
    pub const FD_MINUS_INDEPENDENT: u64 = 3;
    pub const STATIONARY_INDEPENDENT: u64 = 4;
    pub const COUPLING: u64 = 5;
    pub const MINORIZATION: u64 = 6;
    pub const PROBE_POINTS: u64 = 7;
    pub const GRADIENT: u64 = 8;
    pub const CHAIN_FAMILY: u64 = 9;
}

/// Derive the seed of an independent family of streams, e.g. the stationary
/// initial conditions vs. the response paths of one experiment.
pub fn derive_seed(master_seed: u64, purpose: u64) -> u64 {
    splitmix64(master_seed ^ splitmix64(purpose.wrapping_add(0x5EED)))
}

/// Midpoint of the `k`-th of 2^53 equal cells of (0, 1); never 0 or 1.
#[inline]
fn to_open_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn to_half_open_unit(bits: u64) -> f64 {
    // [0, 1)
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn poly8(c: &[f64; 8], r: f64) -> f64 {
    ((((((c[7] * r + c[6]) * r + c[5]) * r + c[4]) * r + c[3]) * r + c[2]) * r + c[1]) * r + c[0]
}

/// Standard normal quantile, Wichura's AS 241 (PPND16), relative accuracy
/// about 1e-16. Branch-light in the central region, which covers 85% of
/// draws.
#[inline]
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_6,
        133.141_667_891_784_38,
        1_971.590_950_306_551_4,
        13_731.693_765_509_461,
        45_921.953_931_549_87,
        67_265.770_927_008_7,
        33_430.575_583_588_13,
        2_509.080_928_730_122_7,
    ];
    const B: [f64; 8] = [
        1.0,
        42.313_330_701_600_91,
        687.187_007_492_057_9,
        5_394.196_021_424_751,
        21_213.794_301_586_596,
        39_307.895_800_092_71,
        28_729.085_735_721_943,
        5_226.495_278_852_854_5,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_5,
        4.630_337_846_156_545,
        5.769_497_221_460_691,
        3.647_848_324_763_204_5,
        1.270_458_252_452_368_4,
        0.241_780_725_177_450_6,
        0.022_723_844_989_269_184,
        7.745_450_142_783_414e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_759,
        1.676_384_830_183_803_8,
        0.689_767_334_985_1,
        0.148_103_976_427_480_08,
        0.015_198_666_563_616_457,
        5.475_938_084_995_345e-4,
        1.050_750_071_644_416_8e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103,
        5.463_784_911_164_114,
        1.784_826_539_917_291_3,
        0.296_560_571_828_504_9,
        0.026_532_189_526_576_124,
        0.001_242_660_947_388_078_4,
        2.711_555_568_743_487_6e-5,
        2.010_334_399_292_288_1e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        0.599_832_206_555_887_9,
        0.136_929_880_922_735_8,
        0.014_875_361_290_850_615,
        7.868_691_311_456_133e-4,
        1.846_318_317_510_054_8e-5,
        1.421_511_758_316_445_9e-7,
        2.044_263_103_389_939_7e-15,
    ];
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly8(&A, r) / poly8(&B, r);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let r = (-tail.ln()).sqrt();
    let v = if r <= 5.0 {
        let r = r - 1.6;
        poly8(&C, r) / poly8(&D, r)
    } else {
        let r = r - 5.0;
        poly8(&E, r) / poly8(&F, r)
    };
    if q < 0.0 {
        -v
    } else {
        v
    }
}

/// One independent noise stream of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u32,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u32) -> Self {
        Self {
            master_seed,
            stream_id,
        }
    }

    #[inline]
    fn key(&self) -> [u32; 2] {
        [self.master_seed as u32, (self.master_seed >> 32) as u32]
    }

    #[inline]
    fn block(&self, step: u64, pair: u32) -> [u32; 4] {
        philox4x32_10(
            [pair, self.stream_id, step as u32, (step >> 32) as u32],
            self.key(),
        )
    }

    /// The normals of component `component` at steps `2*pair_step` and
    /// `2*pair_step + 1`: each 64-bit half of one block is mapped through the
    /// normal quantile function.
    #[inline]
    pub fn normal_pair(&self, pair_step: u64, component: u32) -> (f64, f64) {
        let b = self.block(pair_step, component);
        let w0 = u64::from(b[0]) | (u64::from(b[1]) << 32);
        let w1 = u64::from(b[2]) | (u64::from(b[3]) << 32);
        (
            normal_quantile(to_open_unit(w0)),
            normal_quantile(to_open_unit(w1)),
        )
    }

    #[inline]
    pub fn normal(&self, step: u64, component: u32) -> f64 {
        let (z0, z1) = self.normal_pair(step >> 1, component);
        if step & 1 == 0 {
            z0
        } else {
            z1
        }
    }

    /// Fill `out` with the standard normals for components `0..out.len()`.
    #[inline]
    pub fn fill_normals(&self, step: u64, out: &mut [f64]) {
        for (c, z) in out.iter_mut().enumerate() {
            *z = self.normal(step, c as u32);
        }
    }

    /// The normals of steps `2*pair_step` (into `even`) and `2*pair_step + 1`
    /// (into `odd`) at the cost of one block per component.
    #[inline]
    pub fn fill_normal_pairs(&self, pair_step: u64, even: &mut [f64], odd: &mut [f64]) {
        for (c, (e, o)) in even.iter_mut().zip(odd.iter_mut()).enumerate() {
            (*e, *o) = self.normal_pair(pair_step, c as u32);
        }
    }

    /// A uniform on [0, 1) from a counter lane disjoint from the normals (used
    /// by samplers that need reproducible uniforms, e.g. random chain families
    /// and probe points).
    #[inline]
    pub fn uniform(&self, step: u64, component: u32) -> f64 {
        let b = self.block(step, (component / 2) | 0x8000_0000);
        let w = if component % 2 == 0 {
            u64::from(b[0]) | (u64::from(b[1]) << 32)
        } else {
            u64::from(b[2]) | (u64::from(b[3]) << 32)
        };
        to_half_open_unit(w)
    }
}

/// Sequential convenience reader over one stream, for set-up code that only
/// needs "the next" number (random systems, probe points, chain families).
#[derive(Clone, Debug)]
pub struct StreamCursor {
    stream: RngStream,
    position: u64,
}

impl StreamCursor {
    pub fn new(stream: RngStream) -> Self {
        Self {
            stream,
            position: 0,
        }
    }

    pub fn next_uniform(&mut self) -> f64 {
        let u = self.stream.uniform(self.position, 0);
        self.position += 1;
        u
    }

    pub fn next_normal(&mut self) -> f64 {
        let z = self.stream.normal(self.position, 0);
        self.position += 1;
        z
    }

    /// A uniformly distributed unit vector.
    pub fn next_unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.next_normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors of the Random123 reference implementation.
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0, 0, 0, 0], [0, 0]),
            [0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344],
                [0xa4093822, 0x299f31d0]
            ),
            [0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1]
        );
    }

    #[test]
    fn normals_are_pure_functions_of_the_key() {
        let a = RngStream::new(42, 7);
        let b = RngStream::new(42, 7);
        for step in [0u64, 1, 1 << 33, u64::MAX] {
            for c in 0..5 {
                assert_eq!(a.normal(step, c).to_bits(), b.normal(step, c).to_bits());
            }
        }
        assert_ne!(a.normal(3, 0), RngStream::new(42, 8).normal(3, 0));
        assert_ne!(a.normal(3, 0), RngStream::new(43, 7).normal(3, 0));
        assert_ne!(a.normal(3, 0), a.normal(4, 0));
    }

    #[test]
    fn fill_matches_componentwise() {
        let s = RngStream::new(9, 1);
        let mut out = [0.0; 5];
        s.fill_normals(11, &mut out);
        for (c, z) in out.iter().enumerate() {
            assert_eq!(z.to_bits(), s.normal(11, c as u32).to_bits());
        }
    }

    #[test]
    fn pairs_match_steps() {
        let s = RngStream::new(5, 3);
        let (mut e, mut o) = ([0.0; 3], [0.0; 3]);
        s.fill_normal_pairs(6, &mut e, &mut o);
        for c in 0..3 {
            assert_eq!(e[c].to_bits(), s.normal(12, c as u32).to_bits());
            assert_eq!(o[c].to_bits(), s.normal(13, c as u32).to_bits());
        }
    }

    #[test]
    fn normal_moments() {
        let s = RngStream::new(2024, 0);
        let n = 200_000u64;
        let (mut m1, mut m2, mut m4) = (0.0, 0.0, 0.0);
        for step in 0..n {
            let (a, b) = s.normal_pair(step, 0);
            for z in [a, b] {
                m1 += z;
                m2 += z * z;
                m4 += z.powi(4);
            }
        }
        let n = 2.0 * n as f64;
        let (m1, m2, m4) = (m1 / n, m2 / n, m4 / n);
        // 5 standard errors
        assert!(m1.abs() < 5.0 * (1.0 / n).sqrt(), "mean {m1}");
        assert!((m2 - 1.0).abs() < 5.0 * (2.0 / n).sqrt(), "var {m2}");
        assert!((m4 - 3.0).abs() < 5.0 * (96.0 / n).sqrt(), "kurt {m4}");
    }

    #[test]
    fn quantile_matches_reference() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let n = Normal::new(0.0, 1.0).unwrap();
        for p in [1e-300, 1e-20, 1e-9, 0.001, 0.02425, 0.07, 0.3, 0.5, 0.75, 0.93, 0.999, 1.0 - 1e-12] {
            let z = normal_quantile(p);
            let back = n.cdf(z);
            assert!(((back - p) / p.min(1.0 - p)).abs() < 1e-9, "p={p} z={z} cdf={back}");
        }
        assert_eq!(normal_quantile(0.5), 0.0);
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-14);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }
}
