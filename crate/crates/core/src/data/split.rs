use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shuffle whole events with `seed` and cut at `round(n * train_fraction)`.
pub fn split_events<T>(events: Vec<T>, train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let n_train = (events.len() as f64 * train_fraction).round() as usize;
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; events.len()];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::new());
    for (event, keep) in events.into_iter().zip(is_train) {
        if keep {
            train.push(event);
        } else {
            test.push(event);
        }
    }
    Ok((train, test))
}

/// Split a flat wedge list whose consecutive runs of `wedges_per_event`
/// belong to one event; events are never divided.
pub fn split_dataset<T>(
    wedges: Vec<T>,
    wedges_per_event: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if wedges_per_event == 0 || !wedges.len().is_multiple_of(wedges_per_event) {
        return Err(Error::config(format!(
            "{} wedges do not form whole events of {wedges_per_event}",
            wedges.len()
        )));
    }
    let mut events = Vec::with_capacity(wedges.len() / wedges_per_event);
    let mut it = wedges.into_iter();
    loop {
        let event: Vec<T> = it.by_ref().take(wedges_per_event).collect();
        if event.is_empty() {
            break;
        }
        events.push(event);
    }
    let (train, test) = split_events(events, train_fraction, seed)?;
    Ok((train.into_iter().flatten().collect(), test.into_iter().flatten().collect()))
}
