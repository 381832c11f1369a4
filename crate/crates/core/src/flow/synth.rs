//! Seeded synthetic flow generator.
//!
//! A desk-scale stand-in for a real SDN flow corpus. Every feature is drawn
//! from a per-family log-normal distribution with parameters fixed below.
//! Scales are anchored to observed flow statistics: attack flows live at
//! microsecond durations with packet rates of 10^4/s and above, normal flows
//! at millisecond-to-second durations with rates well under 10^3/s.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flow::{
    AttackCategory, FeatureSchema, FeatureValue, FlowDataset, FlowRecord, ATTACK_FAMILIES,
    DEFAULT_LABEL_COLUMN, DEFAULT_SOCKET_FEATURES,
};

/// The ten retained features, in dataset column order (which is also the
/// sentence order).
pub const TOP10_FEATURES: [&str; 10] = [
    "Flow Duration",
    "Flow Pkts/s",
    "Flow IAT Mean",
    "Flow IAT Max",
    "Bwd IAT Tot",
    "Bwd IAT Mean",
    "Bwd Header Len",
    "Bwd Pkts/s",
    "Pkt Len Max",
    "Init Bwd Win Byts",
];

/// How a sampled value is rendered into raw text. The parsed value is
/// re-derived from the rendered text so raw and value always agree.
#[derive(Clone, Copy)]
enum Render {
    Integer,
    Decimal4,
}

#[derive(Clone, Copy)]
struct LogNormalParam {
    /// Median of the log-normal, i.e. exp of the underlying normal mean.
    median: f64,
    log_sigma: f64,
    render: Render,
}

const fn p(median: f64, log_sigma: f64, render: Render) -> LogNormalParam {
    LogNormalParam {
        median,
        log_sigma,
        render,
    }
}

fn normal_profile() -> [LogNormalParam; 10] {
    [
        p(1.5e6, 1.0, Render::Integer),  // Flow Duration
        p(150.0, 0.6, Render::Decimal4), // Flow Pkts/s
        p(6.0e3, 0.9, Render::Decimal4), // Flow IAT Mean
        p(8.0e5, 1.0, Render::Integer),  // Flow IAT Max
        p(1.5e6, 1.1, Render::Integer),  // Bwd IAT Tot
        p(1.0e4, 0.9, Render::Decimal4), // Bwd IAT Mean
        p(3.0e3, 0.7, Render::Integer),  // Bwd Header Len
        p(90.0, 0.8, Render::Decimal4),  // Bwd Pkts/s
        p(2.0e4, 0.8, Render::Integer),  // Pkt Len Max
        p(64240.0, 0.15, Render::Integer), // Init Bwd Win Byts
    ]
}

/// Per-family medians: [duration, pkts/s, iat mean, iat max, bwd iat tot,
/// bwd iat mean, bwd header len, bwd pkts/s, pkt len max, init bwd win].
/// All families share the attack signature (short flows, high rates) with
/// distinct medians so held-out families are novel but recognizable.
fn attack_medians(family: AttackCategory) -> [f64; 10] {
    match family {
        AttackCategory::Ddos => [18.0, 1.1e5, 17.0, 24.0, 19.0, 16.0, 20.0, 6.4e4, 28.0, 130.0],
        AttackCategory::Dos => [30.0, 6.5e4, 29.0, 41.0, 33.0, 27.0, 40.0, 3.8e4, 46.0, 240.0],
        AttackCategory::Probe => [55.0, 3.6e4, 52.0, 74.0, 58.0, 49.0, 32.0, 2.1e4, 62.0, 420.0],
        AttackCategory::Bfa => [75.0, 2.7e4, 71.0, 99.0, 80.0, 67.0, 52.0, 1.6e4, 84.0, 700.0],
        AttackCategory::Web => [42.0, 4.8e4, 40.0, 57.0, 45.0, 38.0, 28.0, 2.8e4, 52.0, 330.0],
        AttackCategory::Botnet => [24.0, 8.3e4, 23.0, 32.0, 26.0, 21.0, 44.0, 4.9e4, 36.0, 180.0],
        AttackCategory::U2r => [65.0, 3.1e4, 62.0, 87.0, 69.0, 58.0, 36.0, 1.8e4, 72.0, 560.0],
        AttackCategory::Normal => unreachable!("normal traffic has its own profile"),
    }
}

const ATTACK_SIGMAS: [f64; 10] = [0.25, 0.3, 0.25, 0.25, 0.3, 0.3, 0.35, 0.3, 0.4, 0.5];

fn attack_profile(family: AttackCategory) -> [LogNormalParam; 10] {
    let medians = attack_medians(family);
    let normal = normal_profile();
    let mut out = [p(1.0, 0.0, Render::Integer); 10];
    for i in 0..10 {
        out[i] = LogNormalParam {
            median: medians[i],
            log_sigma: ATTACK_SIGMAS[i],
            render: normal[i].render,
        };
    }
    out
}

/// Synthetic corpus request: class sizes, seed, and class separation.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_normal: usize,
    /// Count per attack family. Families are always emitted in canonical
    /// order regardless of how this list is built.
    pub attacks: Vec<(AttackCategory, usize)>,
    pub seed: u64,
    /// In (0, 1]: 1.0 keeps the anchored class means, smaller values pull
    /// normal and attack log-means toward their midpoint.
    pub separation: f64,
}

impl SyntheticSpec {
    pub fn new(n_normal: usize, attacks: Vec<(AttackCategory, usize)>, seed: u64) -> Self {
        Self {
            n_normal,
            attacks,
            seed,
            separation: 1.0,
        }
    }

    fn count_for(&self, family: AttackCategory) -> usize {
        self.attacks
            .iter()
            .filter(|(f, _)| *f == family)
            .map(|(_, n)| n)
            .sum()
    }
}

/// Generates a labeled flow dataset over exactly [`TOP10_FEATURES`].
///
/// Records are emitted in blocks: normal first, then each requested attack
/// family in canonical order. The generator is a pure function of the spec;
/// the same spec yields a byte-identical dataset.
pub fn generate_synthetic_flows(spec: &SyntheticSpec) -> Result<FlowDataset> {
    if spec.attacks.iter().any(|(f, _)| *f == AttackCategory::Normal) {
        return Err(Error::InvalidArgument(
            "normal traffic is requested via n_normal, not the attack map".into(),
        ));
    }
    if !(spec.separation > 0.0 && spec.separation <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "separation must be in (0, 1], got {}",
            spec.separation
        )));
    }
    let total_attacks: usize = ATTACK_FAMILIES.iter().map(|&f| spec.count_for(f)).sum();
    if spec.n_normal + total_attacks == 0 {
        return Err(Error::EmptyInput("at least one class must be nonempty".into()));
    }

    let schema = FeatureSchema::new(
        TOP10_FEATURES.iter().map(|s| s.to_string()).collect(),
        DEFAULT_SOCKET_FEATURES.iter().map(|s| s.to_string()).collect(),
        DEFAULT_LABEL_COLUMN.to_string(),
    )?;

    // Midpoint between the normal log-mean and the average attack log-mean,
    // per feature; separation scales both classes' distances to it.
    let normal = normal_profile();
    let mut attack_anchor = [0.0f64; 10];
    for family in ATTACK_FAMILIES {
        let medians = attack_medians(family);
        for i in 0..10 {
            attack_anchor[i] += medians[i].ln() / ATTACK_FAMILIES.len() as f64;
        }
    }
    let midpoint: Vec<f64> = (0..10)
        .map(|i| (normal[i].median.ln() + attack_anchor[i]) / 2.0)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.n_normal + total_attacks);

    sample_block(
        &mut rng,
        &mut records,
        AttackCategory::Normal,
        spec.n_normal,
        &normal,
        &midpoint,
        spec.separation,
    );
    for family in ATTACK_FAMILIES {
        let count = spec.count_for(family);
        sample_block(
            &mut rng,
            &mut records,
            family,
            count,
            &attack_profile(family),
            &midpoint,
            spec.separation,
        );
    }

    Ok(FlowDataset {
        schema,
        records,
        provenance: format!(
            "synthetic seed={} separation={}",
            spec.seed, spec.separation
        ),
    })
}

fn sample_block(
    rng: &mut ChaCha8Rng,
    records: &mut Vec<FlowRecord>,
    category: AttackCategory,
    count: usize,
    profile: &[LogNormalParam; 10],
    midpoint: &[f64],
    separation: f64,
) {
    for _ in 0..count {
        let mut values = Vec::with_capacity(10);
        for (i, param) in profile.iter().enumerate() {
            let mu = param.median.ln();
            let mu_eff = midpoint[i] + separation * (mu - midpoint[i]);
            let z: f64 = rng.sample(StandardNormal);
            let sampled = (mu_eff + param.log_sigma * z).exp();
            let raw = match param.render {
                Render::Integer => format!("{}", sampled.round().max(1.0) as i64),
                Render::Decimal4 => format!("{sampled:.4}"),
            };
            let value: f64 = raw.parse().expect("rendered text is numeric");
            values.push(FeatureValue { raw, value });
        }
        records.push(FlowRecord::new(values, category));
    }
}
