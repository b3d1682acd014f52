//! Real-time factor measurement with an injectable clock.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::dsp::AudioBuffer;
use crate::tokenizer::{TokenizerError, TokenizerModel};

/// Monotonic time source in seconds.
pub trait Clock {
    fn now(&mut self) -> f64;
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&mut self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    /// Mean over files of processing time / audio duration.
    pub rtf: f64,
    pub per_file: Vec<f64>,
    /// Untimed runs on the first file before measurement.
    pub warmup_runs: usize,
}

/// Times `process` on every file after `warmup` untimed runs on the first one.
pub fn measure_rtf_with<C: Clock, E>(
    clock: &mut C,
    corpus: &[AudioBuffer],
    warmup: usize,
    mut process: impl FnMut(&AudioBuffer) -> Result<(), E>,
) -> Result<RtfReport, EvalError>
where
    EvalError: From<E>,
{
    let first = corpus.iter().find(|a| !a.is_empty()).ok_or(EvalError::EmptyCorpus)?;
    for _ in 0..warmup {
        process(first)?;
    }
    let mut per_file = Vec::new();
    for audio in corpus.iter().filter(|a| !a.is_empty()) {
        let start = clock.now();
        process(audio)?;
        let elapsed = clock.now() - start;
        per_file.push(elapsed / audio.duration_secs());
    }
    let rtf = per_file.iter().sum::<f64>() / per_file.len() as f64;
    Ok(RtfReport { rtf, per_file, warmup_runs: warmup })
}

/// Wall-clock encode + decode RTF of `model`, single-threaded.
pub fn measure_rtf(model: &TokenizerModel, corpus: &[AudioBuffer], warmup: usize) -> Result<RtfReport, EvalError> {
    measure_rtf_with(&mut SystemClock::default(), corpus, warmup, |a| -> Result<(), TokenizerError> {
        std::hint::black_box(model.reconstruct(a)?);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    use std::cell::Cell;
    use std::rc::Rc;

    /// Reads a time shared with the processing closure.
    struct FakeClock {
        t: Rc<Cell<f64>>,
    }

    impl Clock for FakeClock {
        fn now(&mut self) -> f64 {
            self.t.get()
        }
    }

    #[test]
    fn fixture_two_seconds_per_ten() {
        let corpus = vec![AudioBuffer::silence(160_000, 16_000)];
        let time = Rc::new(Cell::new(0.0));
        let mut clock = FakeClock { t: time.clone() };
        let mut calls = 0;
        let report = measure_rtf_with(&mut clock, &corpus, 3, |_| -> Result<(), EvalError> {
            calls += 1;
            // warm-up runs cost 100 s each and must not be counted
            time.set(time.get() + if calls <= 3 { 100.0 } else { 2.0 });
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 4);
        assert_eq!(report.rtf, 0.2);
        assert_eq!(report.warmup_runs, 3);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let mut c = SystemClock::default();
        let r = measure_rtf_with(&mut c, &[], 1, |_| -> Result<(), EvalError> { Ok(()) });
        assert!(matches!(r, Err(EvalError::EmptyCorpus)));
    }

    #[test]
    fn real_clock_is_positive() {
        let corpus = vec![AudioBuffer::silence(1600, 16_000)];
        let mut c = SystemClock::default();
        let r = measure_rtf_with(&mut c, &corpus, 1, |a| -> Result<(), EvalError> {
            std::hint::black_box(crate::evalkit::mel_distance(a, a));
            Ok(())
        })
        .unwrap();
        assert!(r.rtf > 0.0 && r.rtf.is_finite());
    }
}
