//! Over-the-air uplink: power scaling, single-symbol OFDM modulation,
//! Rayleigh fading across `N` receive antennas, and maximum-ratio combining
//! with knowledge of the per-antenna sum channel only.
//!
//! Channel gains are i.i.d. CN(0, sigma_h^2) per (client, antenna,
//! subcarrier) and are redrawn every round. Antenna `n` draws its gains and
//! its noise from its own streams ([`Purpose::ChannelGains`] /
//! [`Purpose::ChannelNoise`] with index `n`), so the per-antenna work can be
//! spread across threads without changing a single bit of the output.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::mean_of;
use crate::rng::{Purpose, RoundSeeds};

/// Antennas handled per parallel batch in [`transmit_and_combine`].
const ANTENNA_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelConfig {
    pub antennas: usize,
    pub clients: usize,
    pub sigma_h2: f64,
    pub sigma_z2: f64,
    pub p_bar: f64,
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.antennas == 0 {
            return Err(Error::invalid("antennas", "must be >= 1"));
        }
        if self.clients == 0 {
            return Err(Error::invalid("clients", "must be >= 1"));
        }
        if !(self.sigma_h2 > 0.0 && self.sigma_h2.is_finite()) {
            return Err(Error::invalid("sigma_h2", format!("must be > 0, got {}", self.sigma_h2)));
        }
        if !(self.sigma_z2 >= 0.0 && self.sigma_z2.is_finite()) {
            return Err(Error::invalid("sigma_z2", format!("must be >= 0, got {}", self.sigma_z2)));
        }
        if !(self.p_bar > 0.0 && self.p_bar.is_finite()) {
            return Err(Error::invalid("p_bar", format!("must be > 0, got {}", self.p_bar)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfdmSymbol {
    pub x: Vec<Complex64>,
}

impl OfdmSymbol {
    pub fn subcarriers(&self) -> usize {
        self.x.len()
    }
}

/// One round's channel realisation.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundChannel {
    pub clients: usize,
    pub antennas: usize,
    pub subcarriers: usize,
    /// Gains laid out `[client][antenna][subcarrier]`.
    pub h: Vec<Complex64>,
    /// Noise laid out `[antenna][subcarrier]`.
    pub z: Vec<Complex64>,
}

impl RoundChannel {
    pub fn gains(&self, client: usize, antenna: usize) -> &[Complex64] {
        let start = (client * self.antennas + antenna) * self.subcarriers;
        &self.h[start..start + self.subcarriers]
    }

    pub fn noise(&self, antenna: usize) -> &[Complex64] {
        &self.z[antenna * self.subcarriers..(antenna + 1) * self.subcarriers]
    }
}

/// A CN(0, variance) sample: real and imaginary parts each N(0, variance / 2).
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let sd = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(sd * re, sd * im)
}

/// Gains of one antenna for every client, `[client][subcarrier]`.
fn antenna_gains(cfg: &ChannelConfig, s: usize, seeds: &RoundSeeds, antenna: usize) -> Vec<Complex64> {
    let mut rng = seeds.stream(Purpose::ChannelGains, antenna as u64);
    (0..cfg.clients * s).map(|_| complex_gaussian(&mut rng, cfg.sigma_h2)).collect()
}

fn antenna_noise(cfg: &ChannelConfig, s: usize, seeds: &RoundSeeds, antenna: usize) -> Vec<Complex64> {
    if cfg.sigma_z2 == 0.0 {
        return vec![Complex64::new(0.0, 0.0); s];
    }
    let mut rng = seeds.stream(Purpose::ChannelNoise, antenna as u64);
    (0..s).map(|_| complex_gaussian(&mut rng, cfg.sigma_z2)).collect()
}

/// `alpha = sqrt(p_bar / max_m ||u_m||^2)`; `None` when every update is zero
/// and the round's transmission must be skipped.
pub fn compute_alpha(updates: &[Vec<f64>], p_bar: f64) -> Result<Option<f64>> {
    if updates.is_empty() {
        return Err(Error::invalid("updates", "need at least one"));
    }
    if !(p_bar > 0.0 && p_bar.is_finite()) {
        return Err(Error::invalid("p_bar", format!("must be > 0, got {p_bar}")));
    }
    let max_norm2 = updates
        .iter()
        .map(|u| u.iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max);
    if max_norm2 == 0.0 {
        return Ok(None);
    }
    Ok(Some((p_bar / max_norm2).sqrt()))
}

/// `x = alpha * (u[..s] + j u[s..])` with `s = k / 2`.
pub fn modulate(u: &[f64], alpha: f64) -> Result<OfdmSymbol> {
    if u.len() % 2 != 0 {
        return Err(Error::invalid(
            "k_abs",
            format!("OFDM mapping needs an even length, got {}", u.len()),
        ));
    }
    let (re, im) = u.split_at(u.len() / 2);
    let x = re
        .iter()
        .zip(im)
        .map(|(&a, &b)| Complex64::new(alpha * a, alpha * b))
        .collect();
    Ok(OfdmSymbol { x })
}

/// Inverse of [`modulate`].
pub fn demodulate(symbol: &OfdmSymbol, alpha: f64) -> Vec<f64> {
    let scaled: Vec<Complex64> = symbol.x.iter().map(|x| x / alpha).collect();
    reconstruct(&scaled)
}

pub fn sample_round_channel(cfg: &ChannelConfig, s: usize, seeds: &RoundSeeds) -> Result<RoundChannel> {
    cfg.validate()?;
    let (m_count, n_count) = (cfg.clients, cfg.antennas);
    let mut h = vec![Complex64::new(0.0, 0.0); m_count * n_count * s];
    let mut z = Vec::with_capacity(n_count * s);
    for n in 0..n_count {
        let g = antenna_gains(cfg, s, seeds, n);
        for m in 0..m_count {
            let dst = (m * n_count + n) * s;
            h[dst..dst + s].copy_from_slice(&g[m * s..(m + 1) * s]);
        }
        z.extend(antenna_noise(cfg, s, seeds, n));
    }
    Ok(RoundChannel {
        clients: m_count,
        antennas: n_count,
        subcarriers: s,
        h,
        z,
    })
}

fn check_symbols(symbols: &[OfdmSymbol], clients: usize, s: usize) -> Result<()> {
    if symbols.len() != clients {
        return Err(Error::DimensionMismatch {
            context: "client symbols",
            expected: clients,
            found: symbols.len(),
        });
    }
    if let Some(bad) = symbols.iter().find(|x| x.subcarriers() != s) {
        return Err(Error::DimensionMismatch {
            context: "subcarriers",
            expected: s,
            found: bad.subcarriers(),
        });
    }
    Ok(())
}

/// One antenna's received vector, `sum_m h_m ⊙ x_m + z`.
fn superpose<'a>(
    gains: impl Iterator<Item = &'a [Complex64]>,
    symbols: &[OfdmSymbol],
    noise: &[Complex64],
) -> Vec<Complex64> {
    let mut y = vec![Complex64::new(0.0, 0.0); noise.len()];
    for (h, sym) in gains.zip(symbols) {
        for ((yi, hi), xi) in y.iter_mut().zip(h).zip(&sym.x) {
            *yi += hi * xi;
        }
    }
    for (yi, zi) in y.iter_mut().zip(noise) {
        *yi += zi;
    }
    y
}

/// Received vectors `y_n`, laid out `[antenna][subcarrier]`.
pub fn receive(symbols: &[OfdmSymbol], ch: &RoundChannel) -> Result<Vec<Complex64>> {
    check_symbols(symbols, ch.clients, ch.subcarriers)?;
    let mut y = Vec::with_capacity(ch.antennas * ch.subcarriers);
    for n in 0..ch.antennas {
        y.extend(superpose(
            (0..ch.clients).map(|m| ch.gains(m, n)),
            symbols,
            ch.noise(n),
        ));
    }
    Ok(y)
}

/// `conj(sum_m h_m) ⊙ y` for one antenna.
fn matched(gains: &[&[Complex64]], y: &[Complex64]) -> Vec<Complex64> {
    let s = y.len();
    let mut sum_h = vec![Complex64::new(0.0, 0.0); s];
    for h in gains {
        for (acc, hi) in sum_h.iter_mut().zip(*h) {
            *acc += hi;
        }
    }
    sum_h.iter().zip(y).map(|(h, yi)| h.conj() * yi).collect()
}

fn mrc_scale(alpha: f64, cfg: &ChannelConfig) -> f64 {
    1.0 / (alpha * cfg.clients as f64 * cfg.sigma_h2 * cfg.antennas as f64)
}

/// Normalised MRC output `(1 / (alpha M sigma_h^2 N)) sum_n conj(sum_m h_{m,n}) ⊙ y_n`.
pub fn mrc_combine(y: &[Complex64], ch: &RoundChannel, alpha: f64, cfg: &ChannelConfig) -> Result<Vec<Complex64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("alpha", format!("must be > 0, got {alpha}")));
    }
    let s = ch.subcarriers;
    if y.len() != ch.antennas * s {
        return Err(Error::DimensionMismatch {
            context: "received vectors",
            expected: ch.antennas * s,
            found: y.len(),
        });
    }
    let mut acc = vec![Complex64::new(0.0, 0.0); s];
    for n in 0..ch.antennas {
        let gains: Vec<&[Complex64]> = (0..ch.clients).map(|m| ch.gains(m, n)).collect();
        for (a, c) in acc.iter_mut().zip(matched(&gains, &y[n * s..(n + 1) * s])) {
            *a += c;
        }
    }
    let scale = mrc_scale(alpha, cfg);
    Ok(acc.into_iter().map(|a| a * scale).collect())
}

/// `[Re(y); Im(y)]`.
pub fn reconstruct(y_out: &[Complex64]) -> Vec<f64> {
    y_out.iter().map(|c| c.re).chain(y_out.iter().map(|c| c.im)).collect()
}

/// Noise- and interference-free average `(1/M) sum_m u_m`.
pub fn ideal_aggregate(updates: &[Vec<f64>]) -> Result<Vec<f64>> {
    mean_of(updates.iter().map(Vec::as_slice), "compressed updates")
}

/// Draws the round's channel and returns the MRC output, without holding
/// the full gain tensor in memory. Bit-identical to
/// `mrc_combine(receive(symbols, sample_round_channel(..)), ..)`.
pub fn transmit_and_combine(
    symbols: &[OfdmSymbol],
    cfg: &ChannelConfig,
    seeds: &RoundSeeds,
    alpha: f64,
    exec: Execution,
) -> Result<Vec<Complex64>> {
    cfg.validate()?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("alpha", format!("must be > 0, got {alpha}")));
    }
    let s = symbols.first().map_or(0, OfdmSymbol::subcarriers);
    check_symbols(symbols, cfg.clients, s)?;
    let mut acc = vec![Complex64::new(0.0, 0.0); s];
    for start in (0..cfg.antennas).step_by(ANTENNA_BATCH) {
        let batch = ANTENNA_BATCH.min(cfg.antennas - start);
        let contributions = exec.map(batch, |i| {
            let n = start + i;
            let g = antenna_gains(cfg, s, seeds, n);
            let gains: Vec<&[Complex64]> = g.chunks_exact(s.max(1)).take(cfg.clients).collect();
            let y = superpose(gains.iter().copied(), symbols, &antenna_noise(cfg, s, seeds, n));
            matched(&gains, &y)
        });
        for c in contributions {
            for (a, v) in acc.iter_mut().zip(c) {
                *a += v;
            }
        }
    }
    let scale = mrc_scale(alpha, cfg);
    Ok(acc.into_iter().map(|a| a * scale).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SimRng;
    use rand::SeedableRng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn cfg(antennas: usize, clients: usize, sigma_z2: f64) -> ChannelConfig {
        ChannelConfig {
            antennas,
            clients,
            sigma_h2: 1.0,
            sigma_z2,
            p_bar: 10.0,
        }
    }

    fn random_updates(m: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SimRng::seed_from_u64(seed);
        (0..m).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn alpha_examples() {
        // max ||u||^2 = 2.5
        let us = vec![vec![1.0, 0.5], vec![1.5, 0.5], vec![0.0, 0.0]];
        assert!((compute_alpha(&us, 10.0).unwrap().unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(compute_alpha(&us, 2.5).unwrap(), Some(1.0));
        assert_eq!(compute_alpha(&[vec![0.0; 3], vec![0.0; 3]], 1.0).unwrap(), None);
        assert!(compute_alpha(&us, 0.0).is_err());
        assert!(compute_alpha(&[], 1.0).is_err());
    }

    #[test]
    fn alpha_saturates_power_budget() {
        let us = random_updates(7, 20, 3);
        let a = compute_alpha(&us, 3.7).unwrap().unwrap();
        let powers: Vec<f64> = us.iter().map(|u| u.iter().map(|v| (a * v).powi(2)).sum()).collect();
        let max = powers.iter().copied().fold(0.0, f64::max);
        assert!((max - 3.7).abs() < 1e-12);
        assert!(powers.iter().all(|&p| p <= 3.7 * (1.0 + 1e-12)));
    }

    #[test]
    fn modulate_examples() {
        let x = modulate(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap();
        assert_eq!(x.x, vec![c(0.5, 1.5), c(1.0, 2.0)]);
        assert_eq!(modulate(&[0.0; 6], 3.0).unwrap().x, vec![c(0.0, 0.0); 3]);
        assert!(modulate(&[1.0, 2.0, 3.0], 1.0).is_err());
        for u in random_updates(5, 12, 9) {
            let back = demodulate(&modulate(&u, 1.7).unwrap(), 1.7);
            for (a, b) in u.iter().zip(&back) {
                assert!((a - b).abs() < 1e-15);
            }
            assert_eq!(reconstruct(&modulate(&u, 1.0).unwrap().x), u);
        }
    }

    #[test]
    fn reconstruct_examples() {
        assert_eq!(reconstruct(&[c(0.5, 1.5), c(1.0, 2.0)]), vec![0.5, 1.0, 1.5, 2.0]);
        assert_eq!(reconstruct(&[c(3.0, 0.0), c(-1.0, 0.0)]), vec![3.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn noiseless_channel_has_zero_noise() {
        let ch = sample_round_channel(&cfg(3, 2, 0.0), 5, &RoundSeeds::new(1, 0, 0)).unwrap();
        assert!(ch.z.iter().all(|z| *z == c(0.0, 0.0)));
        assert_eq!(ch.h.len(), 2 * 3 * 5);
    }

    #[test]
    fn gain_moments() {
        let draws = 1_000_000;
        let mut rng = SimRng::seed_from_u64(12);
        let sigma_h2 = 2.0;
        let (mut power, mut re, mut im) = (0.0, 0.0, 0.0);
        for _ in 0..draws {
            let h = complex_gaussian(&mut rng, sigma_h2);
            power += h.norm_sqr();
            re += h.re;
            im += h.im;
        }
        let n = draws as f64;
        assert!((power / n / sigma_h2 - 1.0).abs() < 0.01);
        // each component has variance sigma_h2 / 2
        let tol = 3.0 * (sigma_h2 / 2.0f64).sqrt() / n.sqrt();
        assert!((re / n).abs() < tol && (im / n).abs() < tol);
    }

    #[test]
    fn receive_examples() {
        // M = 1, all-ones gains, no noise
        let ch = RoundChannel {
            clients: 1,
            antennas: 3,
            subcarriers: 2,
            h: vec![c(1.0, 0.0); 6],
            z: vec![c(0.0, 0.0); 6],
        };
        let x = OfdmSymbol { x: vec![c(1.0, -2.0), c(0.5, 4.0)] };
        let y = receive(std::slice::from_ref(&x), &ch).unwrap();
        for n in 0..3 {
            assert_eq!(&y[n * 2..n * 2 + 2], x.x.as_slice());
        }
        // silent clients: y = z
        let ch2 = sample_round_channel(&cfg(2, 3, 1.0), 4, &RoundSeeds::new(5, 0, 0)).unwrap();
        let silent = vec![OfdmSymbol { x: vec![c(0.0, 0.0); 4] }; 3];
        assert_eq!(receive(&silent, &ch2).unwrap(), ch2.z);
        // two clients, one antenna, one subcarrier
        let ch3 = RoundChannel {
            clients: 2,
            antennas: 1,
            subcarriers: 1,
            h: vec![c(1.0, 0.0), c(0.0, 1.0)],
            z: vec![c(1.0, 0.0)],
        };
        let xs = [OfdmSymbol { x: vec![c(2.0, 0.0)] }, OfdmSymbol { x: vec![c(3.0, 0.0)] }];
        assert_eq!(receive(&xs, &ch3).unwrap(), vec![c(3.0, 3.0)]);
        assert!(receive(&xs[..1], &ch3).is_err());
    }

    #[test]
    fn single_link_mrc_cancels_exactly() {
        let h = c(0.6, 0.8); // |h|^2 = 1 = sigma_h2
        let ch = RoundChannel {
            clients: 1,
            antennas: 1,
            subcarriers: 1,
            h: vec![h],
            z: vec![c(0.0, 0.0)],
        };
        let alpha = 2.0;
        let sym = modulate(&[0.3, -0.7], alpha).unwrap();
        let y = receive(std::slice::from_ref(&sym), &ch).unwrap();
        let out = mrc_combine(&y, &ch, alpha, &cfg(1, 1, 0.0)).unwrap();
        assert!((out[0] - c(0.3, -0.7)).norm() < 1e-15);
        assert!(mrc_combine(&y, &ch, 0.0, &cfg(1, 1, 0.0)).is_err());
    }

    #[test]
    fn fused_path_is_bit_identical() {
        let config = cfg(150, 3, 0.5);
        let seeds = RoundSeeds::new(99, 2, 7);
        let us = random_updates(3, 10, 4);
        let alpha = compute_alpha(&us, config.p_bar).unwrap().unwrap();
        let symbols: Vec<OfdmSymbol> = us.iter().map(|u| modulate(u, alpha).unwrap()).collect();
        let ch = sample_round_channel(&config, 5, &seeds).unwrap();
        let y = receive(&symbols, &ch).unwrap();
        let reference = mrc_combine(&y, &ch, alpha, &config).unwrap();
        for exec in [Execution::Sequential, Execution::Parallel] {
            let fused = transmit_and_combine(&symbols, &config, &seeds, alpha, exec).unwrap();
            assert_eq!(fused, reference, "{exec:?}");
        }
    }

    #[test]
    fn ideal_aggregate_examples() {
        assert_eq!(ideal_aggregate(&[vec![1.0, 2.0]]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(ideal_aggregate(&[vec![1.0, -2.0], vec![-1.0, 2.0]]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn massive_array_approaches_ideal_average() {
        let config = cfg(100_000, 2, 0.0);
        let us = random_updates(2, 8, 21);
        let alpha = compute_alpha(&us, config.p_bar).unwrap().unwrap();
        let symbols: Vec<OfdmSymbol> = us.iter().map(|u| modulate(u, alpha).unwrap()).collect();
        let out = transmit_and_combine(&symbols, &config, &RoundSeeds::new(3, 0, 0), alpha, Execution::default()).unwrap();
        let est = reconstruct(&out);
        let ideal = ideal_aggregate(&us).unwrap();
        let err: f64 = est.iter().zip(&ideal).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = ideal.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / norm < 0.01, "relative error {}", err / norm);
    }
}
