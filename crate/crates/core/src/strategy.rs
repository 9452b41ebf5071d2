//! Training variants as pluggable strategies. A variant decides, per step,
//! which temperature the reweighted aggregation uses, or opts out of
//! reweighting altogether. Variants are registered by name and looked up at
//! run time, so the training loop is written once.

use crate::error::{Error, Result};
use crate::reweight::ReweightConfig;

/// One training variant's temperature policy. `tau` returning `None` means
/// the step aggregates gradients by plain sum; `Some(t)` means
/// self-influence softmax weighting at temperature `t`.
pub trait Variant: Sync {
    fn name(&self) -> &'static str;
    fn tau(&self, step: u64, cfg: &ReweightConfig) -> Option<f64>;
}

/// Plain sum aggregation on every step.
struct Baseline;

impl Variant for Baseline {
    fn name(&self) -> &'static str {
        "baseline"
    }

    fn tau(&self, _step: u64, _cfg: &ReweightConfig) -> Option<f64> {
        None
    }
}

/// Two-stage weighting: tau1 through the switch step, tau2 after.
struct Presence;

impl Variant for Presence {
    fn name(&self) -> &'static str {
        "presence"
    }

    fn tau(&self, step: u64, cfg: &ReweightConfig) -> Option<f64> {
        Some(crate::reweight::schedule_tau(step, cfg))
    }
}

/// First-stage temperature the whole run.
struct PresenceD;

impl Variant for PresenceD {
    fn name(&self) -> &'static str {
        "presence-d"
    }

    fn tau(&self, _step: u64, cfg: &ReweightConfig) -> Option<f64> {
        Some(cfg.tau1)
    }
}

/// Second-stage temperature the whole run.
struct PresenceI;

impl Variant for PresenceI {
    fn name(&self) -> &'static str {
        "presence-i"
    }

    fn tau(&self, _step: u64, cfg: &ReweightConfig) -> Option<f64> {
        Some(cfg.tau2)
    }
}

/// The mirrored schedule: tau2 first, tau1 after the switch step.
struct PresenceID;

impl Variant for PresenceID {
    fn name(&self) -> &'static str {
        "presence-i-d"
    }

    fn tau(&self, step: u64, cfg: &ReweightConfig) -> Option<f64> {
        Some(if step <= cfg.switch_step {
            cfg.tau2
        } else {
            cfg.tau1
        })
    }
}

static REGISTRY: [&dyn Variant; 5] = [
    &Baseline,
    &Presence,
    &PresenceD,
    &PresenceI,
    &PresenceID,
];

/// All registered variant names, in registry order.
pub fn variant_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|v| v.name()).collect()
}

/// Look a variant up by its registered name.
pub fn lookup(name: &str) -> Result<&'static dyn Variant> {
    REGISTRY
        .iter()
        .find(|v| v.name() == name)
        .copied()
        .ok_or_else(|| {
            Error::Usage(format!(
                "unknown variant {name:?} (expected one of: {})",
                variant_names().join(", ")
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ReweightConfig {
        ReweightConfig::defaults_with(10)
    }

    #[test]
    fn registry_lists_all_variants() {
        assert_eq!(
            variant_names(),
            vec!["baseline", "presence", "presence-d", "presence-i", "presence-i-d"]
        );
        for name in variant_names() {
            assert_eq!(lookup(name).unwrap().name(), name);
        }
        assert!(lookup("nope").is_err());
    }

    #[test]
    fn baseline_never_weights() {
        let v = lookup("baseline").unwrap();
        assert_eq!(v.tau(1, &cfg()), None);
        assert_eq!(v.tau(1000, &cfg()), None);
    }

    #[test]
    fn presence_follows_the_two_stage_schedule() {
        let v = lookup("presence").unwrap();
        assert_eq!(v.tau(1, &cfg()), Some(1.0));
        assert_eq!(v.tau(10, &cfg()), Some(1.0));
        assert_eq!(v.tau(11, &cfg()), Some(-1.0));
    }

    #[test]
    fn ablations_hold_one_temperature() {
        let d = lookup("presence-d").unwrap();
        let i = lookup("presence-i").unwrap();
        for step in [1, 10, 11, 500] {
            assert_eq!(d.tau(step, &cfg()), Some(1.0));
            assert_eq!(i.tau(step, &cfg()), Some(-1.0));
        }
    }

    #[test]
    fn inverse_then_direct_mirrors_presence() {
        let v = lookup("presence-i-d").unwrap();
        let p = lookup("presence").unwrap();
        for step in [1u64, 5, 10, 11, 20] {
            let mirrored = v.tau(step, &cfg()).unwrap();
            let forward = p.tau(step, &cfg()).unwrap();
            assert_eq!(mirrored, -forward);
        }
        assert_eq!(v.tau(10, &cfg()), Some(-1.0));
        assert_eq!(v.tau(11, &cfg()), Some(1.0));
    }

    #[test]
    fn presence_with_switch_at_total_steps_is_direct() {
        let mut c = cfg();
        c.switch_step = 1000;
        let p = lookup("presence").unwrap();
        let d = lookup("presence-d").unwrap();
        for step in 1..=1000 {
            assert_eq!(p.tau(step, &c), d.tau(step, &c));
        }
    }
}
