//! Scenario-driven network simulation: configuration, the event loop and
//! its reports.

mod report;
mod runtime;
mod scenario;

pub use report::{
    read_log, reconcile, replay, write_log, ChannelReport, InvariantReport, LatencySummary,
    LinkReport, LogEntry, LogRecord, NetEvent, PathReport, Replay, RunReport, SwitchReport,
};
pub use runtime::{
    compare_delivery_modes, run, run_with_log, DeliveryComparison, ModeSummary, Network,
    DEVICE_SERVICE,
};
pub use scenario::{
    load_scenario, parse_scenario, Action, Delivery, EventConfig, LinkConfig, NodeConfig,
    SaeConfig, ScenarioConfig, ScenarioError, Settings, SwitchGroupConfig,
};
