//! Bundled case and scenario fixtures used by tests, examples, and the
//! simulation harness defaults.

use crate::grid::{parse_case, Network};
use crate::sim::Scenario;

/// Five-prosumer network on the classic Stagg & El-Abiad 5-bus line data
/// with modified loads and costs; slack at `pi1`, producers at `pi1`,
/// `pi2`, `pi3`, demand at `pi2`, `pi4`, `pi5`.
pub const FIVE_BUS: &str = include_str!("../fixtures/five_bus.case.toml");

/// Two identical producers over one lossless line, 10 MW demand at `n2`.
pub const TWO_NODE: &str = include_str!("../fixtures/two_node.case.toml");

/// Parses the bundled five-bus case. The fixture is valid by test.
pub fn five_bus() -> Network {
    parse_case(FIVE_BUS).expect("bundled five-bus fixture is valid")
}

/// Parses the bundled two-node case. The fixture is valid by test.
pub fn two_node() -> Network {
    parse_case(TWO_NODE).expect("bundled two-node fixture is valid")
}

/// One-interval +15% overproduction spike on `pi2`: the factor flares
/// and decays without any isolation vote.
pub const SPIKE_SCENARIO: &str = include_str!("../fixtures/spike.scenario.toml");

/// Persistent -10% underproduction on `pi2` with the isolation threshold
/// calibrated (230) so the unanimous vote lands in interval 22.
pub const PERSISTENT_SCENARIO: &str = include_str!("../fixtures/persistent.scenario.toml");

/// The same persistent anomaly under a 1300 threshold: isolation waits
/// until interval 28, on a stretched 36-interval horizon.
pub const PERSISTENT_HIGH_THRESHOLD_SCENARIO: &str =
    include_str!("../fixtures/persistent_high_threshold.scenario.toml");

/// Parses the bundled spike scenario.
pub fn spike_scenario() -> Scenario {
    Scenario::parse(SPIKE_SCENARIO).expect("bundled spike scenario is valid")
}

/// Parses the bundled persistent-anomaly scenario.
pub fn persistent_scenario() -> Scenario {
    Scenario::parse(PERSISTENT_SCENARIO).expect("bundled persistent scenario is valid")
}

/// Parses the bundled high-threshold variant.
pub fn persistent_high_threshold_scenario() -> Scenario {
    Scenario::parse(PERSISTENT_HIGH_THRESHOLD_SCENARIO)
        .expect("bundled high-threshold scenario is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse_and_fit_the_five_bus_case() {
        let net = five_bus();
        for s in [
            spike_scenario(),
            persistent_scenario(),
            persistent_high_threshold_scenario(),
        ] {
            s.validate_against(&net).expect("scenario fits the case");
        }
    }
}
