# Subsolvers package for the thermodem engine
# Property data, particle interiors, kinetics, DEM, fluid, coupling and scenario driver.
