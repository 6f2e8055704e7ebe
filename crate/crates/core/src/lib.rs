//! Market-based compute allocation over a deterministic simulated cluster.
//!
//! The crate has two halves. The market half is a central [`bank`], a
//! price-ranked host [`directory`], one [`auctioneer`] per host dividing CPU
//! among bids in proportion to their rates, and [`bidder`] agents that pick
//! hosts and adjust bids to hold a target share. The deployment half is a
//! small declarative [`descriptor`] language and a [`lifecycle`] engine that
//! deploys, starts, monitors, and tears down VM component trees.
//!
//! Everything runs as services on [`simnet`], a single-threaded discrete
//! event runtime with a virtual clock, so every run is reproducible from its
//! seed and scenario.

pub mod auctioneer;
pub mod bank;
pub mod bidder;
pub mod cli;
pub mod descriptor;
pub mod directory;
pub mod lifecycle;
pub mod market;
pub mod report;
pub mod scenario;
pub mod simnet;
pub mod time;

pub use market::{Bid, BidId, BidRate, Credit, HostCapacity, ShareVector};
pub use time::SimTime;
