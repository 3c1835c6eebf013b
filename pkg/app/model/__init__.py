"""Encoders, SimR alignment and the contrastive objective."""
