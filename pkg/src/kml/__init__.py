"""kml — stream-native ML pipeline platform.

An embedded commit-log broker, binary record codecs, a declarative
neural-network engine, and a REST control plane that trains and serves
models directly from data streams.
"""

__version__ = "0.1.0"
