pub mod agent;
pub mod manager;
pub mod messages;
pub mod model;
pub mod probe;
pub mod security;
pub mod sim;
pub mod suite;
pub mod topogen;
