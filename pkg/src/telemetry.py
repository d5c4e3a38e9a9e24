import functools
import time


def timer(recorder, scope: str, method=None):
    """Time a method of an instance and hand the milliseconds to `recorder`.

    The measurement is recorded whether the call succeeds or raises, with the
    attributes `tokenmixer.<scope>.method` and `tokenmixer.<scope>.success`.
    """
    def outer_wrapper(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            elapsed_time = 0
            try:
                THIS_INSTANCE = args[0]
                start_time = time.time()
                result = func(*args, **kwargs)
                elapsed_time = time.time() - start_time
            except Exception:
                recorder(
                    THIS_INSTANCE,
                    amount=int(elapsed_time*1000),
                    attributes={
                        f"tokenmixer.{scope}.method": method,
                        f"tokenmixer.{scope}.success": False
                    }
                    )
                raise
            else:
                recorder(
                    THIS_INSTANCE,
                    amount=int(elapsed_time*1000),
                    attributes={
                        f"tokenmixer.{scope}.method": method,
                        f"tokenmixer.{scope}.success": True
                    }
                    )
                return result
        return wrapper
    return outer_wrapper
