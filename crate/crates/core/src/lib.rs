//! Pure logic of the conductor orchestration engine.
//!
//! Everything in this crate is deterministic and free of IO: service schemas
//! and their validation, launch payload rendering, the entry state machine
//! and event state derivation, backend placement and relay planning,
//! hostname allocation, event-scoped tokens and ACLs. The `conductor` crate
//! wires these into a running engine.
//!
//! The crate is `no_std` (it needs `alloc`) unless the `std` feature is on.

#![cfg_attr(not(any(feature = "std", test)), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod acl;
pub mod hostname;
pub mod id;
pub mod model;
pub mod placement;
pub mod quota;
pub mod state;
pub mod token;
pub mod version;

pub use acl::{Decision, EventAcl, Identity};
pub use hostname::allocate_hostname;
pub use id::{IdGenerator, SortableId};
pub use model::{
    render_launch_payload, validate_service_spec, FieldKind, FieldSpec, IoSchema, LaunchPayload,
    Limit, Literal, Policy, RenderError, ResourceConstraints, ServiceRef, ServiceSpec, SidecarSpec,
    ValidationReport, Violation,
};
pub use placement::{
    plan_bridges, route, BackendDescriptor, BackendKind, BridgeEndpoint, BridgeError, BridgeSpec,
    Fleet, Resources, RouteError,
};
pub use quota::{Admission, QuotaCounter};
pub use state::{derive_event_state, EntryCondition, EntryState, EventState};
pub use token::{Claims, SigningKey, TokenError, TokenKind};
pub use version::Version;
