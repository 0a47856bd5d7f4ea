"""Time-to-event pretraining toolkit."""
