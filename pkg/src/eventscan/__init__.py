"""Event-driven LIF networks with chunked parallel-scan simulation and exact gradients."""
