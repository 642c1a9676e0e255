# Joint longitudinal / time-to-event modelling with uncertainty-aware event decisions
