//! Pairwise-mask secure aggregation.
//!
//! Every pair of devices `(i, j)` shares a 32-byte seed fixed at enrollment.
//! In round `t` device `i` derives two directional streams from that seed,
//! `r_ij` and `r_ji`, and adds `Σ_{j ∈ Ω \ {i}} (r_ij − r_ji)` to its
//! fixed-point encoded model, all modulo a power of two `M`. Each pair's
//! contributions appear once with each sign across the selected set, so the
//! masks telescope to zero and the server recovers exactly the modular sum of
//! the plaintexts.
//!
//! # Wire layout
//!
//! * PRF output, coordinate `k` of round `t`: the first 8 bytes, read
//!   little-endian, of `SHA-256(seed ‖ LE64(t) ‖ LE64(k))`, reduced mod `M`.
//! * Directional stream `r_ij`: the same with one extra trailing byte,
//!   `SHA-256(seed ‖ LE64(t) ‖ LE64(k) ‖ [dir])`, where `dir = 0` when
//!   `i < j` and `1` otherwise.
//! * Ciphertext entries serialize as little-endian 8-byte words
//!   ([`MaskedVector::to_le_bytes`]).

use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

/// A power-of-two modulus `M ≤ 2^63`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modulus(u64);

impl Modulus {
    pub fn new(m: u64) -> Result<Self> {
        if !m.is_power_of_two() || m < 2 || m > 1 << 63 {
            return Err(invalid(format!("modulus must be a power of two in [2, 2^63], got {m}")));
        }
        Ok(Modulus(m))
    }

    pub fn pow2(bits: u32) -> Result<Self> {
        if bits == 0 || bits > 63 {
            return Err(invalid(format!("modulus exponent must lie in [1, 63], got {bits}")));
        }
        Ok(Modulus(1 << bits))
    }

    pub fn get(self) -> u64 {
        self.0
    }

    #[inline]
    fn reduce(self, x: u64) -> u64 {
        x & (self.0 - 1)
    }

    #[inline]
    pub fn add(self, a: u64, b: u64) -> u64 {
        self.reduce(a.wrapping_add(b))
    }

    #[inline]
    pub fn sub(self, a: u64, b: u64) -> u64 {
        self.reduce(a.wrapping_sub(b))
    }
}

pub type Seed = [u8; 32];

/// Symmetric table of pairwise seeds for `n` devices.
#[derive(Clone)]
pub struct SeedTable {
    n: usize,
    // upper triangle, row-major over i < j
    seeds: Vec<Seed>,
}

impl std::fmt::Debug for SeedTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SeedTable").field("n", &self.n).finish_non_exhaustive()
    }
}

impl SeedTable {
    pub fn devices(&self) -> usize {
        self.n
    }

    fn index(&self, i: usize, j: usize) -> usize {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        // rows 0..a hold (n-1) + (n-2) + ... + (n-a) entries
        a * (2 * self.n - a - 1) / 2 + (b - a - 1)
    }

    /// The seed shared by `i` and `j`. Symmetric in its arguments.
    ///
    /// Panics if `i == j` or either index is out of range.
    pub fn get(&self, i: usize, j: usize) -> &Seed {
        assert!(i != j && i < self.n && j < self.n, "no seed for pair ({i}, {j})");
        &self.seeds[self.index(i, j)]
    }
}

/// Simulated enrollment: derives every pairwise seed from `master_seed`.
pub fn init_seeds(n: usize, master_seed: &Seed) -> Result<SeedTable> {
    if n < 2 {
        return Err(invalid(format!("secure aggregation needs at least 2 devices, got {n}")));
    }
    let mut seeds = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let mut h = Sha256::new();
            h.update(b"pfl/pairwise-seed/v1");
            h.update(master_seed);
            h.update((i as u64).to_le_bytes());
            h.update((j as u64).to_le_bytes());
            seeds.push(h.finalize().into());
        }
    }
    Ok(SeedTable { n, seeds })
}

fn prf_word(prefix: &Sha256, k: u64, tag: Option<u8>) -> u64 {
    let mut h = prefix.clone();
    h.update(k.to_le_bytes());
    if let Some(tag) = tag {
        h.update([tag]);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
}

fn stream_prefix(seed: &Seed, t: u64) -> Sha256 {
    let mut h = Sha256::new();
    h.update(seed);
    h.update(t.to_le_bytes());
    h
}

/// `d` pseudorandom values mod `M` for round `t`.
pub fn prf_stream(seed: &Seed, t: u64, d: usize, modulus: Modulus) -> Vec<u64> {
    let prefix = stream_prefix(seed, t);
    (0..d as u64)
        .map(|k| modulus.reduce(prf_word(&prefix, k, None)))
        .collect()
}

/// Directional stream `r_from,to` for round `t`.
pub fn directional_stream(
    seeds: &SeedTable,
    from: usize,
    to: usize,
    t: u64,
    d: usize,
    modulus: Modulus,
) -> Vec<u64> {
    let tag = if from < to { 0 } else { 1 };
    let prefix = stream_prefix(seeds.get(from, to), t);
    (0..d as u64)
        .map(|k| modulus.reduce(prf_word(&prefix, k, Some(tag))))
        .collect()
}

/// `r_ij − r_ji` for `i < j`; the pair contributes this to `i` and its
/// negation to `j`.
fn pair_difference(seeds: &SeedTable, i: usize, j: usize, t: u64, d: usize, modulus: Modulus) -> Vec<u64> {
    let prefix = stream_prefix(seeds.get(i, j), t);
    let (fwd, back) = if i < j { (0, 1) } else { (1, 0) };
    (0..d as u64)
        .map(|k| {
            let a = modulus.reduce(prf_word(&prefix, k, Some(fwd)));
            let b = modulus.reduce(prf_word(&prefix, k, Some(back)));
            modulus.sub(a, b)
        })
        .collect()
}

fn check_selection(omega: &[usize], n: usize) -> Result<()> {
    for w in omega.windows(2) {
        if w[0] >= w[1] {
            return Err(invalid("selected set must be strictly increasing"));
        }
    }
    if let Some(&last) = omega.last() {
        if last >= n {
            return Err(invalid(format!("device {last} is not enrolled (n = {n})")));
        }
    }
    Ok(())
}

/// Mask of device `i` in round `t` for the selected set `omega` (sorted,
/// distinct): `Σ_{j ∈ Ω \ {i}} (r_ij − r_ji) mod M`.
pub fn compute_mask(
    i: usize,
    omega: &[usize],
    t: u64,
    seeds: &SeedTable,
    d: usize,
    modulus: Modulus,
) -> Result<Vec<u64>> {
    check_selection(omega, seeds.devices())?;
    if omega.binary_search(&i).is_err() {
        return Err(invalid(format!("device {i} is not in the selected set")));
    }
    let mut mask = vec![0u64; d];
    for &j in omega.iter().filter(|&&j| j != i) {
        let diff = pair_difference(seeds, i, j, t, d, modulus);
        for (m, v) in mask.iter_mut().zip(diff) {
            *m = modulus.add(*m, v);
        }
    }
    Ok(mask)
}

/// Masks of every device in `omega` for round `t`, in the order of `omega`.
///
/// Produces the same vectors as calling [`compute_mask`] per device, but
/// evaluates each pair's streams once instead of twice.
pub fn compute_round_masks(
    omega: &[usize],
    t: u64,
    seeds: &SeedTable,
    d: usize,
    modulus: Modulus,
) -> Result<Vec<Vec<u64>>> {
    check_selection(omega, seeds.devices())?;
    let mut masks = vec![vec![0u64; d]; omega.len()];
    for a in 0..omega.len() {
        for b in a + 1..omega.len() {
            let diff = pair_difference(seeds, omega[a], omega[b], t, d, modulus);
            for (k, v) in diff.into_iter().enumerate() {
                masks[a][k] = modulus.add(masks[a][k], v);
                masks[b][k] = modulus.sub(masks[b][k], v);
            }
        }
    }
    Ok(masks)
}

/// Fixed-point encoding of reals into `Z_M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointCodec {
    frac_bits: u32,
    modulus: Modulus,
    clip_range: f64,
}

/// An encoded vector and how many of its entries had to be saturated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub values: Vec<u64>,
    pub saturated: usize,
}

impl FixedPointCodec {
    pub const DEFAULT_FRAC_BITS: u32 = 16;
    pub const DEFAULT_MODULUS_BITS: u32 = 63;
    pub const DEFAULT_CLIP_RANGE: f64 = (1u64 << 20) as f64;

    /// Builds a codec whose modulus leaves room to sum `max_summands`
    /// encodings without wraparound: `M > 2·r·S·clip_range`.
    pub fn new(frac_bits: u32, modulus: Modulus, clip_range: f64, max_summands: usize) -> Result<Self> {
        if frac_bits == 0 || frac_bits > 52 {
            return Err(invalid(format!("fractional bits must lie in [1, 52], got {frac_bits}")));
        }
        if !(clip_range.is_finite() && clip_range > 0.0) {
            return Err(invalid(format!("clip range must be positive, got {clip_range}")));
        }
        if max_summands == 0 {
            return Err(invalid("codec must allow at least one summand"));
        }
        let scale = (1u64 << frac_bits) as f64;
        let needed = 2.0 * max_summands as f64 * scale * clip_range;
        if modulus.get() as f64 <= needed {
            return Err(invalid(format!(
                "modulus {} too small to sum {max_summands} values of magnitude {clip_range} at scale 2^{frac_bits}",
                modulus.get()
            )));
        }
        Ok(FixedPointCodec { frac_bits, modulus, clip_range })
    }

    /// `f = 16`, `M = 2^63`, `clip_range = 2^20`.
    pub fn default_for(max_summands: usize) -> Result<Self> {
        Self::new(
            Self::DEFAULT_FRAC_BITS,
            Modulus::pow2(Self::DEFAULT_MODULUS_BITS)?,
            Self::DEFAULT_CLIP_RANGE,
            max_summands,
        )
    }

    pub fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    pub fn modulus(&self) -> Modulus {
        self.modulus
    }

    pub fn clip_range(&self) -> f64 {
        self.clip_range
    }

    /// `round(x·S) mod M`, saturating inputs outside `±clip_range`.
    pub fn encode(&self, x: &[f64]) -> Encoded {
        let scale = self.scale();
        let mut saturated = 0;
        let values = x
            .iter()
            .map(|&v| {
                let v = if v.is_nan() {
                    saturated += 1;
                    0.0
                } else if v.abs() > self.clip_range {
                    saturated += 1;
                    self.clip_range.copysign(v)
                } else {
                    v
                };
                let q = (v * scale).round() as i64;
                self.modulus.reduce(q as u64)
            })
            .collect();
        Encoded { values, saturated }
    }

    /// Lifts each entry to `(−M/2, M/2]`, then divides by `S·count`.
    pub fn decode_sum(&self, c: &[u64], count: usize) -> Vec<f64> {
        let m = self.modulus.get();
        let half = m / 2;
        let denom = self.scale() * count as f64;
        c.iter()
            .map(|&v| {
                let v = self.modulus.reduce(v);
                let signed = if v > half { -((m - v) as i64) } else { v as i64 };
                signed as f64 / denom
            })
            .collect()
    }
}

/// A device's masked upload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedVector {
    pub round: u64,
    pub device: usize,
    pub values: Vec<u64>,
}

impl MaskedVector {
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Entrywise `p + mask mod M`.
pub fn encrypt(
    plaintext: &[u64],
    mask: &[u64],
    modulus: Modulus,
    round: u64,
    device: usize,
) -> Result<MaskedVector> {
    if plaintext.len() != mask.len() {
        return Err(Error::DimensionMismatch { expected: plaintext.len(), got: mask.len() });
    }
    let values = plaintext.iter().zip(mask).map(|(&p, &r)| modulus.add(p, r)).collect();
    Ok(MaskedVector { round, device, values })
}

/// Entrywise modular sum of ciphertexts from a single round.
pub fn aggregate(ciphers: &[MaskedVector], modulus: Modulus) -> Result<Vec<u64>> {
    let Some(first) = ciphers.first() else {
        return Err(Error::Protocol("no ciphertexts to aggregate".into()));
    };
    let d = first.values.len();
    let mut sum = vec![0u64; d];
    for c in ciphers {
        if c.round != first.round {
            return Err(Error::Protocol(format!(
                "ciphertext from round {} mixed with round {}",
                c.round, first.round
            )));
        }
        if c.values.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: c.values.len() });
        }
        for (s, &v) in sum.iter_mut().zip(&c.values) {
            *s = modulus.add(*s, v);
        }
    }
    Ok(sum)
}

/// Server side of one round: collects one upload per selected device and
/// refuses to decrypt unless all of them arrived.
#[derive(Debug)]
pub struct RoundAggregator {
    round: u64,
    selected: Vec<usize>,
    received: Vec<Option<MaskedVector>>,
    modulus: Modulus,
}

impl RoundAggregator {
    pub fn new(round: u64, selected: &[usize], modulus: Modulus) -> Self {
        RoundAggregator {
            round,
            selected: selected.to_vec(),
            received: vec![None; selected.len()],
            modulus,
        }
    }

    pub fn submit(&mut self, cipher: MaskedVector) -> Result<()> {
        if cipher.round != self.round {
            return Err(Error::Protocol(format!(
                "device {} sent a round {} upload during round {}",
                cipher.device, cipher.round, self.round
            )));
        }
        let Ok(slot) = self.selected.binary_search(&cipher.device) else {
            return Err(Error::Protocol(format!("device {} was not selected", cipher.device)));
        };
        if self.received[slot].is_some() {
            return Err(Error::Protocol(format!("duplicate upload from device {}", cipher.device)));
        }
        self.received[slot] = Some(cipher);
        Ok(())
    }

    /// Modular sum of the plaintexts. Fails if any selected device dropped.
    pub fn finish(self) -> Result<Vec<u64>> {
        let mut ciphers = Vec::with_capacity(self.received.len());
        for (id, c) in self.selected.iter().zip(self.received) {
            match c {
                Some(c) => ciphers.push(c),
                None => return Err(Error::Protocol(format!("device {id} dropped out of round {}", self.round))),
            }
        }
        aggregate(&ciphers, self.modulus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m16() -> Modulus {
        Modulus::pow2(16).unwrap()
    }

    #[test]
    fn seeds_are_symmetric_and_deterministic() {
        let a = init_seeds(6, &[1; 32]).unwrap();
        let b = init_seeds(6, &[1; 32]).unwrap();
        let c = init_seeds(6, &[2; 32]).unwrap();
        assert_eq!(a.get(2, 5), a.get(5, 2));
        let mut any_diff = false;
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    assert_eq!(a.get(i, j), b.get(i, j));
                    any_diff |= a.get(i, j) != c.get(i, j);
                }
            }
        }
        assert!(any_diff);
        let mut all: Vec<_> = a.seeds.clone();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 15);
        assert!(init_seeds(1, &[0; 32]).is_err());
    }

    #[test]
    fn prf_stream_bit_exact_layout() {
        let seed = [7u8; 32];
        let mut msg = seed.to_vec();
        msg.extend_from_slice(&3u64.to_le_bytes());
        msg.extend_from_slice(&1u64.to_le_bytes());
        let digest = Sha256::digest(&msg);
        let word = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let s = prf_stream(&seed, 3, 2, Modulus::pow2(63).unwrap());
        assert_eq!(s[1], word & ((1 << 63) - 1));
    }

    #[test]
    fn prf_stream_determinism_and_round_separation() {
        let seed = [9u8; 32];
        let m = Modulus::pow2(32).unwrap();
        assert_eq!(prf_stream(&seed, 0, 64, m), prf_stream(&seed, 0, 64, m));
        assert_ne!(prf_stream(&seed, 0, 64, m), prf_stream(&seed, 1, 64, m));
    }

    #[test]
    fn prf_stream_mean_is_central() {
        let m = Modulus::pow2(40).unwrap();
        let s = prf_stream(&[3u8; 32], 5, 100_000, m);
        let mean = s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
        let expected = (m.get() - 1) as f64 / 2.0;
        assert!((mean - expected).abs() < 0.01 * m.get() as f64);
    }

    #[test]
    fn directional_streams_differ() {
        let seeds = init_seeds(3, &[4; 32]).unwrap();
        let m = Modulus::pow2(63).unwrap();
        assert_ne!(directional_stream(&seeds, 0, 2, 0, 8, m), directional_stream(&seeds, 2, 0, 0, 8, m));
    }

    #[test]
    fn masks_cancel_and_singleton_is_zero() {
        let seeds = init_seeds(7, &[5; 32]).unwrap();
        let m = Modulus::pow2(63).unwrap();
        assert_eq!(compute_mask(3, &[3], 0, &seeds, 4, m).unwrap(), vec![0; 4]);
        let omega = [0, 2, 3, 6];
        let mut sum = vec![0u64; 16];
        for &i in &omega {
            let mask = compute_mask(i, &omega, 11, &seeds, 16, m).unwrap();
            for (s, v) in sum.iter_mut().zip(mask) {
                *s = m.add(*s, v);
            }
        }
        assert_eq!(sum, vec![0; 16]);
        assert_ne!(
            compute_mask(0, &omega, 0, &seeds, 16, m).unwrap(),
            compute_mask(0, &omega, 1, &seeds, 16, m).unwrap()
        );
        assert!(compute_mask(1, &omega, 0, &seeds, 16, m).is_err());
    }

    #[test]
    fn round_masks_match_per_device_masks() {
        let seeds = init_seeds(9, &[6; 32]).unwrap();
        let m = Modulus::pow2(63).unwrap();
        let omega = [1, 4, 5, 8];
        let all = compute_round_masks(&omega, 2, &seeds, 10, m).unwrap();
        for (slot, &i) in omega.iter().enumerate() {
            assert_eq!(all[slot], compute_mask(i, &omega, 2, &seeds, 10, m).unwrap());
        }
    }

    #[test]
    fn encode_examples() {
        let codec = FixedPointCodec::new(8, Modulus::pow2(32).unwrap(), 100.0, 4).unwrap();
        assert_eq!(codec.encode(&[1.5]).values, vec![384]);
        assert_eq!(codec.encode(&[0.0]).values, vec![0]);
        assert_eq!(codec.encode(&[-0.25]).values, vec![(1u64 << 32) - 64]);
        let e = codec.encode(&[1e6, -1e6, 3.0]);
        assert_eq!(e.saturated, 2);
        assert_eq!(codec.decode_sum(&e.values, 1), vec![100.0, -100.0, 3.0]);
    }

    #[test]
    fn codec_rejects_wraparound_configurations() {
        // 2·r·S·clip = 2·4·256·2^20 = 2^31 ≥ M = 2^31
        assert!(FixedPointCodec::new(8, Modulus::pow2(31).unwrap(), (1 << 20) as f64, 4).is_err());
        assert!(FixedPointCodec::new(8, Modulus::pow2(32).unwrap(), (1 << 20) as f64, 4).is_ok());
        assert!(Modulus::new(12).is_err());
        assert!(FixedPointCodec::default_for(16).is_ok());
    }

    #[test]
    fn decode_sum_round_trip_error() {
        let codec = FixedPointCodec::default_for(3).unwrap();
        let m = codec.modulus();
        let s = codec.scale();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(codec.decode_sum(&[0, 0], 3), vec![0.0, 0.0]);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let xs: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..8).map(|_| rng.random_range(-50.0..50.0)).collect())
                .collect();
            let mut sum = vec![0u64; 8];
            for x in &xs {
                for (a, v) in sum.iter_mut().zip(codec.encode(x).values) {
                    *a = m.add(*a, v);
                }
            }
            let avg = codec.decode_sum(&sum, 3);
            for k in 0..8 {
                let truth = (xs[0][k] + xs[1][k] + xs[2][k]) / 3.0;
                worst = worst.max((avg[k] - truth).abs());
            }
        }
        assert!(worst <= 3.0 / (2.0 * s * 3.0));
    }

    #[test]
    fn encrypt_aggregate_examples() {
        let m = m16();
        let c1 = encrypt(&[5], &[1000], m, 0, 0).unwrap();
        let c2 = encrypt(&[7], &[m.sub(0, 1000)], m, 0, 1).unwrap();
        assert_eq!(aggregate(&[c1, c2], m).unwrap(), vec![12]);

        let seeds = init_seeds(4, &[8; 32]).unwrap();
        let mask = compute_mask(2, &[2], 0, &seeds, 3, m).unwrap();
        assert_eq!(encrypt(&[1, 2, 3], &mask, m, 0, 2).unwrap().values, vec![1, 2, 3]);

        assert!(encrypt(&[1, 2], &[1], m, 0, 0).is_err());
        let a = MaskedVector { round: 0, device: 0, values: vec![1, 2] };
        let b = MaskedVector { round: 1, device: 1, values: vec![1, 2] };
        let c = MaskedVector { round: 0, device: 1, values: vec![1] };
        assert!(matches!(aggregate(&[a.clone(), b], m), Err(Error::Protocol(_))));
        assert!(matches!(aggregate(&[a, c], m), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn random_plaintexts_aggregate_exactly() {
        let seeds = init_seeds(16, &[10; 32]).unwrap();
        let m = Modulus::pow2(63).unwrap();
        let omega = [0, 1, 3, 4, 6, 7, 9, 11, 12, 15];
        let d = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plains: Vec<Vec<u64>> =
            omega.iter().map(|_| (0..d).map(|_| rng.random::<u64>() & (m.get() - 1)).collect()).collect();
        let masks = compute_round_masks(&omega, 4, &seeds, d, m).unwrap();
        let mut server = RoundAggregator::new(4, &omega, m);
        for ((p, mask), &i) in plains.iter().zip(&masks).zip(&omega) {
            server.submit(encrypt(p, mask, m, 4, i).unwrap()).unwrap();
        }
        let got = server.finish().unwrap();
        let mut expected = vec![0u64; d];
        for p in &plains {
            for (e, &v) in expected.iter_mut().zip(p) {
                *e = m.add(*e, v);
            }
        }
        assert_eq!(got, expected);
    }

    #[test]
    fn aggregator_rejects_dropout_and_strangers() {
        let m = m16();
        let mut server = RoundAggregator::new(0, &[1, 2], m);
        assert!(server.submit(MaskedVector { round: 0, device: 3, values: vec![0] }).is_err());
        assert!(server.submit(MaskedVector { round: 1, device: 1, values: vec![0] }).is_err());
        server.submit(MaskedVector { round: 0, device: 1, values: vec![0] }).unwrap();
        assert!(server.submit(MaskedVector { round: 0, device: 1, values: vec![0] }).is_err());
        assert!(matches!(server.finish(), Err(Error::Protocol(_))));
    }

    #[test]
    fn single_ciphertext_looks_uniform() {
        // one fixed plaintext re-masked in 10^4 rounds; top 4 bits binned
        let seeds = init_seeds(3, &[11; 32]).unwrap();
        let m = Modulus::pow2(63).unwrap();
        let omega = [0, 1, 2];
        let plain = [123_456_789u64];
        let mut bins = [0usize; 16];
        let trials = 10_000;
        for t in 0..trials {
            let mask = compute_mask(0, &omega, t, &seeds, 1, m).unwrap();
            let c = encrypt(&plain, &mask, m, t, 0).unwrap();
            bins[(c.values[0] >> 59) as usize] += 1;
        }
        let expected = trials as f64 / 16.0;
        let chi2: f64 = bins.iter().map(|&b| (b as f64 - expected).powi(2) / expected).sum();
        // 15 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 37.70, "chi-square {chi2}");
    }

    #[test]
    fn ciphertext_layout_is_little_endian() {
        let c = MaskedVector { round: 0, device: 0, values: vec![1, 0x0102] };
        assert_eq!(c.to_le_bytes(), vec![1, 0, 0, 0, 0, 0, 0, 0, 2, 1, 0, 0, 0, 0, 0, 0]);
    }
}
