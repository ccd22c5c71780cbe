"""Creative generation and personalization toolkit.

Turns catalog product images into placement-sized creatives with
generated backgrounds, serves them under strict-latency rules via
caches and an async generation queue, and personalizes the background
prompt per context with a LinUCB contextual bandit.
"""

__version__ = "0.1.0"
