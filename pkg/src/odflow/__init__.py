"""Dynamic POI-graph OD flow forecasting: ingestion, temporal graph
encoder, edge-token transformer decoder, staged transfer, and RL head
adaptation."""

__version__ = "0.1.0"
