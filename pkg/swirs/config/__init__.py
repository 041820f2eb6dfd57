"""Settings, logging and scenario loading."""
