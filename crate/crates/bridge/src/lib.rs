//! Live sessions over WebSocket: a human steers the evader while the
//! controller chases at a fixed 20 Hz step.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{ClientMessage, ErrorCode, Mode, ServerFrame, StateFrame};
pub use server::{router, AppState, SessionInfo};
pub use session::{replay, Recording, Segment, Session, TapeEntry, RATE_LIMIT};
