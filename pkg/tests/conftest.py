from hypothesis import HealthCheck, settings

# virtualized CI box: first-touch page faults can stall an example long
# enough to trip the default 200ms deadline, so time limits are off
settings.register_profile(
    "ci", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("ci")
