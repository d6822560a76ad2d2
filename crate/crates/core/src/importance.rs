//! Channel importance scores.
//!
//! Energy is the squared Euclidean norm of a channel's weights. The
//! out-channel criterion looks only at the producing layer; the out-in-channel
//! criterion also counts the consuming layer's in-channel, so a channel whose
//! output weights are small but whose downstream weights are large is still
//! considered important.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Layer, Model, ModelError};

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("criterion scale_magnitude needs a scale_shift layer between the layers of pair {0}")]
    NoScaleLayer(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// `‖W^l_{i,:}‖²`
    OutChannel,
    /// `‖W^l_{i,:}‖² + ‖W^{l+1}_{:,i}‖²`
    OutInChannel,
    /// `|γ_i|` of the first scale_shift between the two layers.
    ScaleMagnitude,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Self::OutChannel => "out_channel",
            Self::OutInChannel => "out_in_channel",
            Self::ScaleMagnitude => "scale_magnitude",
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Self::OutChannel, Self::OutInChannel, Self::ScaleMagnitude]
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown criterion '{s}'"))
    }
}

/// One out-in-channel group and its score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutInChannelGroup {
    pub pair_id: usize,
    pub channel: usize,
    pub energy: f64,
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn energy_out_channel(model: &Model, pair: usize, channel: usize) -> Result<f64, ModelError> {
    Ok(sq_norm(&model.out_channel_slice(pair, channel)?))
}

pub fn energy_out_in_channel(
    model: &Model,
    pair: usize,
    channel: usize,
) -> Result<f64, ModelError> {
    Ok(sq_norm(&model.out_channel_slice(pair, channel)?)
        + sq_norm(&model.in_channel_slice(pair, channel)?))
}

/// Scores every group of every pair, in `(pair_id, channel)` order.
pub fn score_all(
    model: &Model,
    criterion: Criterion,
) -> Result<Vec<OutInChannelGroup>, ImportanceError> {
    let mut out = Vec::with_capacity(model.group_count());
    for (p, pair) in model.pairs().iter().enumerate() {
        let gamma = match criterion {
            Criterion::ScaleMagnitude => Some(
                pair.intervening
                    .iter()
                    .find_map(|&l| match model.layer(l) {
                        Layer::ScaleShift { gamma, .. } => Some(gamma.data()),
                        _ => None,
                    })
                    .ok_or(ImportanceError::NoScaleLayer(p))?,
            ),
            _ => None,
        };
        for i in 0..pair.channel_count {
            let energy = match criterion {
                Criterion::OutChannel => energy_out_channel(model, p, i)?,
                Criterion::OutInChannel => energy_out_in_channel(model, p, i)?,
                Criterion::ScaleMagnitude => gamma.unwrap()[i].abs(),
            };
            out.push(OutInChannelGroup {
                pair_id: p,
                channel: i,
                energy,
            });
        }
    }
    Ok(out)
}

/// Ascending energy, ties broken by ascending `(pair_id, channel)`.
pub fn sort_ascending(groups: &mut [OutInChannelGroup]) {
    groups.sort_by(|a, b| {
        a.energy
            .total_cmp(&b.energy)
            .then(a.pair_id.cmp(&b.pair_id))
            .then(a.channel.cmp(&b.channel))
    });
}

/// Smallest number of groups whose energies sum to at least `fraction` of the total.
pub fn groups_holding_fraction(groups: &[OutInChannelGroup], fraction: f64) -> usize {
    let mut energies: Vec<f64> = groups.iter().map(|g| g.energy).collect();
    energies.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = energies.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (k, e) in energies.iter().enumerate() {
        acc += e;
        if acc >= fraction * total {
            return k + 1;
        }
    }
    energies.len()
}

/// Writes `pair_id,out_layer,in_layer,channel,energy` rows.
pub fn write_energy_csv<W: Write>(
    model: &Model,
    groups: &[OutInChannelGroup],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "pair_id,out_layer,in_layer,channel,energy")?;
    for g in groups {
        let pair = &model.pairs()[g.pair_id];
        writeln!(
            w,
            "{},{},{},{},{:e}",
            g.pair_id, pair.out_layer, pair.in_layer, g.channel, g.energy
        )?;
    }
    Ok(())
}
