//! Lane-graph traffic simulator.

pub mod driver;
pub mod env;
pub mod geometry;
pub mod network;
pub mod scenario;
pub mod trace;

pub use driver::{driver_model_step, DriverParamRanges, DriverParams, IdmConstants, Leader};
pub use env::{
    AgentObs, HybridAction, LaneChange, Outcome, SimObservation, Simulator, StepInfo, VehicleState, LANE_CHANGE_STEPS,
    VEHICLE_LENGTH, VEHICLE_WIDTH, WAYPOINT_SPACING,
};
pub use network::{LaneId, LaneSpec, RoadNetwork, Waypoint};
pub use scenario::{EgoTask, RouteSpec, ScenarioConfig, SIM_DT};
pub use trace::TraceRecord;
