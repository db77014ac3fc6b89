//! Simulated transport, byte accounting and the two exchange protocols.

pub mod frame;
pub mod ledger;
pub mod ps;
pub mod ring;
pub mod topology;
pub mod transport;

pub use frame::{read_frame, split_frames, write_frame, DEFAULT_MAX_FRAME};
pub use ledger::{
    compression_ratio, dual_compression_ratio, ratio_from_sizes, CellKey, DualRatio, RateLedger,
};
pub use ps::{dense_mean_reducer, ps_round, DOWNLINK_ROUND, UPLINK_ROUND};
pub use ring::{chunk_ranges, ring_allgather, ring_allreduce, ring_rounds};
pub use topology::{Pattern, Topology};
pub use transport::{LogEntry, Message, SimNetwork, Tag};
