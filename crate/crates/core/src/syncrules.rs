//! Synchronization periods and round timelines.
//!
//! A [`SyncRule`] maps a step index (and the learning-rate schedule) to the
//! number of local steps until the next parameter average. Expanding a rule
//! over a schedule gives the full list of communication rounds.

use serde::{Deserialize, Serialize};

use crate::schedules::LrSchedule;
use crate::{Error, Result};

/// The strategy part of a [`SyncRule`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyncKind {
    /// Fixed period `h_base`.
    Constant,
    /// `H = max(h_base, floor((coef / eta)^gamma))`.
    Power { gamma: u32, coef: f64 },
    /// Every step synchronizes until `switch_step`, then period `h_after`.
    PostLocal { switch_step: u64, h_after: u64 },
    /// Period `h_base` until `switch_step`, then a single round to the end.
    Swap { switch_step: u64 },
}

/// A synchronization strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncRule {
    kind: SyncKind,
    h_base: u64,
}

fn check_h(name: &'static str, h: u64) -> Result<()> {
    if h == 0 {
        Err(Error::param(name, "period must be at least 1"))
    } else {
        Ok(())
    }
}

/// The period a power rule asks for at learning rate `eta`, before any
/// truncation at the end of training.
pub fn power_period(coef: f64, gamma: u32, eta: f64, h_base: u64) -> u64 {
    let raw = (coef / eta).powi(gamma as i32).floor();
    // `as` saturates, so an infinite ratio (eta = 0) becomes u64::MAX.
    (raw as u64).max(h_base)
}

impl SyncRule {
    /// Fixed period `h`.
    pub fn constant(h: u64) -> Result<Self> {
        check_h("h_base", h)?;
        Ok(SyncRule {
            kind: SyncKind::Constant,
            h_base: h,
        })
    }

    /// General power rule `max(h_base, floor((coef / eta)^gamma))`, gamma in 1..=3.
    pub fn power(gamma: u32, coef: f64, h_base: u64) -> Result<Self> {
        check_h("h_base", h_base)?;
        if !(1..=3).contains(&gamma) {
            return Err(Error::param(
                "gamma",
                format!("must be 1, 2 or 3, got {gamma}"),
            ));
        }
        if !(coef.is_finite() && coef > 0.0) {
            return Err(Error::param(
                "coef",
                format!("must be positive and finite, got {coef}"),
            ));
        }
        Ok(SyncRule {
            kind: SyncKind::Power { gamma, coef },
            h_base,
        })
    }

    /// Quadratic rule with growth coefficient `alpha`.
    pub fn qsr(alpha: f64, h_base: u64) -> Result<Self> {
        Self::power(2, alpha, h_base)
    }

    /// Cubic rule with coefficient `rho`.
    pub fn cubic(rho: f64, h_base: u64) -> Result<Self> {
        Self::power(3, rho, h_base)
    }

    /// Period inversely proportional to the learning rate.
    pub fn beta_over_eta(beta: f64, h_base: u64) -> Result<Self> {
        Self::power(1, beta, h_base)
    }

    /// Parallel training until `switch_step`, then constant period `h_after`.
    pub fn post_local(switch_step: u64, h_after: u64) -> Result<Self> {
        check_h("h_after", h_after)?;
        Ok(SyncRule {
            kind: SyncKind::PostLocal {
                switch_step,
                h_after,
            },
            h_base: 1,
        })
    }

    /// Period `h_const` until `switch_step`, then local steps to the end with
    /// one final average.
    pub fn swap(h_const: u64, switch_step: u64) -> Result<Self> {
        check_h("h_const", h_const)?;
        Ok(SyncRule {
            kind: SyncKind::Swap { switch_step },
            h_base: h_const,
        })
    }

    pub fn kind(&self) -> &SyncKind {
        &self.kind
    }

    pub fn h_base(&self) -> u64 {
        self.h_base
    }

    /// Length of the round starting at step `t`. Power rules evaluate the
    /// learning rate at `max(t, t0)`, so warmup rounds use the period of the
    /// first post-warmup round. The result never runs past the last step.
    pub fn next_period(&self, t: u64, schedule: &LrSchedule) -> Result<u64> {
        let total = schedule.total_steps();
        if t >= total {
            return Err(Error::OutOfRange { step: t, total });
        }
        let remaining = total - t;
        let h = match self.kind {
            SyncKind::Constant => self.h_base,
            SyncKind::Power { gamma, coef } => {
                let eta = schedule.lr_at(t.max(schedule.warmup_steps()))?;
                power_period(coef, gamma, eta, self.h_base)
            }
            SyncKind::PostLocal {
                switch_step,
                h_after,
            } => {
                if t < switch_step {
                    1
                } else {
                    h_after
                }
            }
            SyncKind::Swap { switch_step } => {
                if t < switch_step {
                    // The last round before the switch is cut short so the
                    // final phase starts exactly at the switch step.
                    self.h_base.min(switch_step - t)
                } else {
                    remaining
                }
            }
        };
        Ok(h.min(remaining))
    }
}

/// One communication round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub start_step: u64,
    pub period: u64,
    pub lr_at_start: f64,
}

/// All rounds of a run, in order. Round lengths sum to `total_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTimeline {
    pub rounds: Vec<Round>,
    pub total_steps: u64,
    pub num_syncs: u64,
}

impl RoundTimeline {
    /// Synchronizations per step, relative to data-parallel training.
    pub fn comm_fraction(&self) -> f64 {
        self.num_syncs as f64 / self.total_steps as f64
    }
}

/// Applies `rule` greedily from step 0 until the schedule ends.
pub fn expand_timeline(rule: &SyncRule, schedule: &LrSchedule) -> Result<RoundTimeline> {
    let total = schedule.total_steps();
    let mut rounds = Vec::new();
    let mut t = 0;
    while t < total {
        let period = rule.next_period(t, schedule)?;
        rounds.push(Round {
            start_step: t,
            period,
            lr_at_start: schedule.lr_at(t)?,
        });
        t += period;
    }
    let num_syncs = rounds.len() as u64;
    Ok(RoundTimeline {
        rounds,
        total_steps: total,
        num_syncs,
    })
}

/// Number of synchronizations divided by the number of steps.
pub fn comm_fraction(rule: &SyncRule, schedule: &LrSchedule) -> Result<f64> {
    Ok(expand_timeline(rule, schedule)?.comm_fraction())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::{make_cosine, make_linear};
    use proptest::prelude::*;

    fn vit() -> LrSchedule {
        make_cosine(0.008, 1e-6, 10_000, 93_600).unwrap()
    }

    fn flat(eta: f64, total: u64) -> LrSchedule {
        // Linear from eta to eta/2 over a long horizon is flat enough for
        // checks that only look at the first step after warmup.
        make_linear(eta, eta / 2.0, 0, total).unwrap()
    }

    #[test]
    fn qsr_period_examples() {
        // Oracle: the rule written out by hand.
        let by_hand =
            |alpha: f64, eta: f64, hb: u64| ((alpha / eta).powi(2).floor() as u64).max(hb);
        assert_eq!(by_hand(0.0175, 0.008, 4), 4);
        assert_eq!(by_hand(0.0175, 0.0008, 4), 478);

        let rule = SyncRule::qsr(0.0175, 4).unwrap();
        assert_eq!(rule.next_period(0, &flat(0.008, 1000)).unwrap(), 4);
        assert_eq!(rule.next_period(0, &flat(0.0008, 1000)).unwrap(), 478);
    }

    #[test]
    fn last_round_is_truncated() {
        let rule = SyncRule::constant(10).unwrap();
        let s = flat(0.1, 100);
        assert_eq!(rule.next_period(97, &s).unwrap(), 3);
        assert!(matches!(
            rule.next_period(100, &s),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn warmup_rounds_use_post_warmup_rate() {
        let s = make_cosine(0.008, 1e-6, 10_000, 93_600).unwrap();
        let rule = SyncRule::qsr(0.05, 4).unwrap();
        // Oracle: (0.05 / 0.008)^2 = 39.0625.
        assert_eq!(rule.next_period(0, &s).unwrap(), 39);
        assert_eq!(rule.next_period(9_999, &s).unwrap(), 39);
    }

    #[test]
    fn constant_timelines() {
        let s = flat(0.1, 100);
        let one = expand_timeline(&SyncRule::constant(1).unwrap(), &s).unwrap();
        assert_eq!(one.rounds.len(), 100);
        let four = expand_timeline(&SyncRule::constant(4).unwrap(), &s).unwrap();
        assert_eq!(four.rounds.len(), 25);
        assert!(four.rounds.iter().all(|r| r.period == 4));
        assert_eq!(four.comm_fraction(), 0.25);
    }

    #[test]
    fn constant_fractions_on_long_runs() {
        assert_eq!(
            comm_fraction(&SyncRule::constant(4).unwrap(), &vit()).unwrap(),
            0.25
        );
        assert_eq!(
            comm_fraction(&SyncRule::constant(8).unwrap(), &vit()).unwrap(),
            0.125
        );
    }

    #[test]
    fn qsr_vit_fraction() {
        let f = comm_fraction(&SyncRule::qsr(0.0175, 4).unwrap(), &vit()).unwrap();
        assert!((f - 0.104).abs() < 0.0015, "{f}");
    }

    #[test]
    fn qsr_vit_staircase() {
        let tl = expand_timeline(&SyncRule::qsr(0.0175, 4).unwrap(), &vit()).unwrap();
        let periods: Vec<u64> = tl.rounds.iter().map(|r| r.period).collect();
        let last = periods.len() - 1;
        assert_eq!(periods[0], 4);
        assert!(periods[..last].windows(2).all(|w| w[0] <= w[1]));
        // A long H = 4 plateau before growth sets in.
        let plateau = periods.iter().take_while(|&&h| h == 4).count();
        assert!(plateau > 4_000, "{plateau}");
        assert!(periods[last - 1] > 1000);
    }

    #[test]
    fn post_local_switches_once() {
        let s = flat(0.1, 100);
        let tl = expand_timeline(&SyncRule::post_local(40, 8).unwrap(), &s).unwrap();
        for r in &tl.rounds {
            if r.start_step < 40 {
                assert_eq!(r.period, 1);
            }
        }
        let after: Vec<u64> = tl
            .rounds
            .iter()
            .filter(|r| r.start_step >= 40)
            .map(|r| r.period)
            .collect();
        assert_eq!(after, vec![8, 8, 8, 8, 8, 8, 8, 4]);
    }

    #[test]
    fn swap_ends_with_one_average() {
        let s = flat(0.1, 100);
        let tl = expand_timeline(&SyncRule::swap(4, 70).unwrap(), &s).unwrap();
        let last = tl.rounds.last().unwrap();
        // The round starting at 68 is cut to end at the switch.
        assert_eq!(tl.rounds[tl.rounds.len() - 2].period, 2);
        assert_eq!((last.start_step, last.period), (70, 30));
        assert_eq!(tl.num_syncs, 19);
        let tl = expand_timeline(&SyncRule::swap(5, 70).unwrap(), &s).unwrap();
        let last = tl.rounds.last().unwrap();
        assert_eq!((last.start_step, last.period), (70, 30));
    }

    #[test]
    fn rejects_bad_rules() {
        assert!(SyncRule::constant(0).is_err());
        assert!(SyncRule::qsr(0.0, 4).is_err());
        assert!(SyncRule::qsr(-1.0, 4).is_err());
        assert!(SyncRule::power(4, 1.0, 1).is_err());
        assert!(SyncRule::post_local(10, 0).is_err());
        assert!(SyncRule::swap(0, 10).is_err());
    }

    #[test]
    fn cubic_spends_its_budget_earlier_than_qsr() {
        // Pick the cubic coefficient whose communication volume matches QSR
        // on the same schedule, then compare where each rule communicates.
        let s = vit();
        let qsr = SyncRule::qsr(0.0175, 4).unwrap();
        let target = comm_fraction(&qsr, &s).unwrap();
        let (mut lo, mut hi) = (1e-4, 0.05);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if comm_fraction(&SyncRule::cubic(mid, 4).unwrap(), &s).unwrap() > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let cubic = SyncRule::cubic(hi, 4).unwrap();
        let f_cubic = comm_fraction(&cubic, &s).unwrap();
        assert!((f_cubic - target).abs() < 0.005, "{f_cubic} vs {target}");

        // Early in the decay the cubic rule still sits at a shorter period;
        // near the end it has overtaken QSR.
        for t in [22_000, 26_000] {
            assert!(
                cubic.next_period(t, &s).unwrap() < qsr.next_period(t, &s).unwrap(),
                "t={t}"
            );
        }
        let tl_q = expand_timeline(&qsr, &s).unwrap();
        let tl_c = expand_timeline(&cubic, &s).unwrap();
        let last_full = |tl: &RoundTimeline| tl.rounds[tl.rounds.len() - 2].period;
        assert!(last_full(&tl_c) > last_full(&tl_q));
    }

    fn any_rule() -> impl Strategy<Value = SyncRule> {
        prop_oneof![
            (1u64..20).prop_map(|h| SyncRule::constant(h).unwrap()),
            (1u32..=3, 0.001f64..0.5, 1u64..10)
                .prop_map(|(g, c, h)| SyncRule::power(g, c, h).unwrap()),
            (0u64..500, 1u64..20).prop_map(|(s, h)| SyncRule::post_local(s, h).unwrap()),
            (1u64..20, 0u64..500).prop_map(|(h, s)| SyncRule::swap(h, s).unwrap()),
        ]
    }

    fn any_schedule() -> impl Strategy<Value = LrSchedule> {
        (
            0.01f64..1.0,
            0.0f64..0.5,
            10u64..500,
            0.0f64..0.5,
            any::<bool>(),
        )
            .prop_map(|(eta, end_frac, total, warm_frac, cos)| {
                let warm = (total as f64 * warm_frac) as u64;
                if cos {
                    make_cosine(eta, eta * end_frac, warm, total).unwrap()
                } else {
                    make_linear(eta, eta * end_frac, warm, total).unwrap()
                }
            })
    }

    proptest! {
        #[test]
        fn rounds_partition_the_run(rule in any_rule(), s in any_schedule()) {
            let tl = expand_timeline(&rule, &s).unwrap();
            prop_assert_eq!(tl.rounds.iter().map(|r| r.period).sum::<u64>(), s.total_steps());
            let mut t = 0;
            for r in &tl.rounds {
                prop_assert_eq!(r.start_step, t);
                prop_assert!(r.period >= 1);
                t += r.period;
            }
            let f = tl.comm_fraction();
            prop_assert!(f > 0.0 && f <= 1.0);
        }

        #[test]
        fn power_periods_grow_and_respect_the_floor(
            g in 1u32..=3, c in 0.001f64..0.5, hb in 1u64..10, s in any_schedule(),
        ) {
            let rule = SyncRule::power(g, c, hb).unwrap();
            let tl = expand_timeline(&rule, &s).unwrap();
            let n = tl.rounds.len();
            for r in &tl.rounds[..n - 1] {
                prop_assert!(r.period >= hb);
            }
            for w in tl.rounds[..n - 1].windows(2) {
                prop_assert!(w[0].period <= w[1].period);
            }
        }

        #[test]
        fn constant_fraction_is_ceiling(h in 1u64..50, s in any_schedule()) {
            let f = comm_fraction(&SyncRule::constant(h).unwrap(), &s).unwrap();
            let t = s.total_steps();
            prop_assert_eq!(f, t.div_ceil(h) as f64 / t as f64);
        }
    }
}
