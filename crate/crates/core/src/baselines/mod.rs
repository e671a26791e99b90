pub mod avoidance;
pub mod pp;

pub use avoidance::AvoidancePolicy;
pub use pp::{plan_from, prioritized_plan, validate_plans, PlanOutcome, PpController, ReservationTable, SpaceTimePlan};
