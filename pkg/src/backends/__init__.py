from .serial import SerialBackend


def get_backend(backend_name='auto', **kwargs):
    """
    Factory to get the appropriate evaluation backend.
    """
    if backend_name == 'cpu':
        from .cpu import CPUBackend
        return CPUBackend(**kwargs)

    elif backend_name == 'serial':
        return SerialBackend(**kwargs)

    elif backend_name == 'auto':
        # Multi-process pays off only with more than one physical core
        try:
            from .cpu import CPUBackend
            import psutil
            if (psutil.cpu_count(logical=False) or 1) > 1:
                return CPUBackend(**kwargs)
        except ImportError:
            pass

        # Fallback to in-process scoring
        return SerialBackend(**kwargs)

    else:
        from src.errors import InputError
        raise InputError(f"Unknown backend: {backend_name}")
